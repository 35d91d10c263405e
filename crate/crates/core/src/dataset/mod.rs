//! Image dataset catalog: samples, splits, labels and the labeled/unlabeled
//! pool partition consumed by the active-learning loop.

mod manifest_io;
mod pool;
mod preprocess;
mod scan;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest_io::{load_manifest, save_manifest, MANIFEST_HEADER};
pub use pool::{init_pools, LabeledEntry, PoolState};
pub use preprocess::{preprocess_image, ImageTensor, PreprocessConfig};
pub use scan::{scan_directory, Layout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("invalid split `{other}` (expected train, validation or test)")),
        }
    }
}

/// Binary class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Zero,
    One,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Zero => 0,
            Label::One => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.index() as f64
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Zero => Label::One,
            Label::One => Label::Zero,
        }
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label.index() as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Zero),
            1 => Ok(Label::One),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<bool> for Label {
    fn from(positive: bool) -> Label {
        if positive {
            Label::One
        } else {
            Label::Zero
        }
    }
}

/// Who assigned a label. Precedence: human > oracle > autolabel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum LabelSource {
    Human,
    Oracle,
    /// Machine label; carries the checksum of the model that produced it.
    Autolabel(String),
}

impl LabelSource {
    pub fn precedence(&self) -> u8 {
        match self {
            LabelSource::Human => 2,
            LabelSource::Oracle => 1,
            LabelSource::Autolabel(_) => 0,
        }
    }
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelSource::Human => f.write_str("human"),
            LabelSource::Oracle => f.write_str("oracle"),
            LabelSource::Autolabel(sum) => write!(f, "autolabel:{sum}"),
        }
    }
}

impl FromStr for LabelSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "human" => Ok(LabelSource::Human),
            "oracle" => Ok(LabelSource::Oracle),
            _ => match s.strip_prefix("autolabel:") {
                Some(sum) if !sum.is_empty() => Ok(LabelSource::Autolabel(sum.to_string())),
                _ => Err(format!("invalid label source `{s}`")),
            },
        }
    }
}

impl Serialize for LabelSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LabelSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Path relative to the dataset root, `/`-separated.
    pub id: String,
    pub image_ref: PathBuf,
    pub split: Split,
    pub true_label: Option<Label>,
    pub assigned_label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_source: Option<LabelSource>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image_ref: impl Into<PathBuf>, split: Split) -> Self {
        Sample {
            id: id.into(),
            image_ref: image_ref.into(),
            split,
            true_label: None,
            assigned_label: None,
            label_source: None,
        }
    }

    pub fn with_true_label(mut self, label: Label) -> Self {
        self.true_label = Some(label);
        self
    }

    /// Sets the assigned label. Re-assigning the same label from the same
    /// source is a no-op; anything else must go through [`Sample::correct_label`].
    pub fn assign_label(&mut self, label: Label, source: LabelSource) -> Result<()> {
        match (&self.assigned_label, &self.label_source) {
            (None, _) => {
                self.assigned_label = Some(label);
                self.label_source = Some(source);
                Ok(())
            }
            (Some(existing), Some(existing_src)) if *existing == label && *existing_src == source => {
                Ok(())
            }
            (Some(_), existing_src) => Err(Error::LabelConflict {
                id: self.id.clone(),
                existing: existing_src
                    .as_ref()
                    .map_or_else(|| "unknown".to_string(), ToString::to_string),
                incoming: source.to_string(),
            }),
        }
    }

    /// Explicit overwrite of an assigned label. A machine label may still
    /// never replace a human or oracle label.
    pub fn correct_label(&mut self, label: Label, source: LabelSource) -> Result<()> {
        if let Some(existing) = &self.label_source {
            if existing.precedence() > source.precedence() {
                return Err(Error::LabelConflict {
                    id: self.id.clone(),
                    existing: existing.to_string(),
                    incoming: source.to_string(),
                });
            }
        }
        self.assigned_label = Some(label);
        self.label_source = Some(source);
        Ok(())
    }

    /// The label to train on: assigned first, ground truth otherwise.
    pub fn training_label(&self) -> Option<Label> {
        self.assigned_label.or(self.true_label)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

impl fmt::Display for SplitCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "train: {}, validation: {}, test: {}",
            self.train, self.validation, self.test
        )
    }
}

/// Catalog of every sample in a dataset. Samples are kept sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    samples: Vec<Sample>,
    pub class_names: [String; 2],
    pub source_root: PathBuf,
    pub created_at: DateTime<Utc>,
}

impl DatasetManifest {
    pub fn new(
        mut samples: Vec<Sample>,
        class_names: [String; 2],
        source_root: PathBuf,
        created_at: DateTime<Utc>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(DatasetManifest {
            samples,
            class_names,
            source_root,
            created_at,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.position(id).map(|i| &self.samples[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Sample> {
        self.position(id).map(move |i| &mut self.samples[i])
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.samples.binary_search_by(|s| s.id.as_str().cmp(id)).ok()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_samples(&self, split: Split) -> Vec<Sample> {
        self.split(split).cloned().collect()
    }

    pub fn split_counts(&self) -> SplitCounts {
        let mut counts = SplitCounts::default();
        for s in &self.samples {
            match s.split {
                Split::Train => counts.train += 1,
                Split::Validation => counts.validation += 1,
                Split::Test => counts.test += 1,
            }
        }
        counts
    }

    pub fn assign_label(&mut self, id: &str, label: Label, source: LabelSource) -> Result<()> {
        self.get_mut(id)
            .ok_or_else(|| Error::NotFound(format!("sample `{id}`")))?
            .assign_label(label, source)
    }

    /// Looks up each id, failing on the first unknown one.
    pub fn resolve(&self, ids: &[String]) -> Result<Vec<Sample>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::NotFound(format!("sample `{id}`")))
            })
            .collect()
    }
}
