//! Machine labeling at scale with provenance, plus an evaluation of label
//! quality when ground truth is available.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Model;
use crate::dataset::{save_manifest, DatasetManifest, Label, LabelSource, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scores, EvalReport};

/// Samples carrying fresh machine labels, ready to export or merge.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestDelta {
    pub model_checksum: String,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample_id: String,
    pub error_code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoLabelReport {
    pub model_checksum: String,
    pub threshold: f64,
    pub min_confidence: Option<f64>,
    pub total: usize,
    pub labeled: usize,
    /// Below the confidence gate or failed to decode.
    pub skipped: usize,
    pub failures: Vec<SampleFailure>,
    pub zero_coverage: bool,
    /// Over the labeled samples, when all of them have ground truth.
    pub evaluation: Option<EvalReport>,
}

/// Confidence of a binary prediction: distance of `p` from 0.5 mapped to
/// [0.5, 1].
pub fn confidence(p: f64) -> f64 {
    p.max(1.0 - p)
}

pub fn autolabel(
    model: &Model,
    samples: &[Sample],
    threshold: f64,
    min_confidence: Option<f64>,
) -> Result<(ManifestDelta, AutoLabelReport)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Range(format!("threshold {threshold} not in (0, 1)")));
    }
    if let Some(c) = min_confidence {
        if !(c > 0.5 && c <= 1.0) {
            return Err(Error::Range(format!("min_confidence {c} not in (0.5, 1]")));
        }
    }
    let checksum = model.checksum();
    let source = LabelSource::Autolabel(checksum.clone());

    // Per-sample inference so one unreadable image does not sink the run.
    let probs: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| model.predict_proba(std::slice::from_ref(s)).map(|p| p[0]))
        .collect();

    let mut labeled = Vec::new();
    let mut scored = Vec::new();
    let mut failures = Vec::new();
    for (sample, prob) in samples.iter().zip(probs) {
        let p = match prob {
            Ok(p) => p,
            Err(e @ Error::Decode { .. }) | Err(e @ Error::Io { .. }) => {
                failures.push(SampleFailure {
                    sample_id: sample.id.clone(),
                    error_code: e.code().to_string(),
                    message: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        if min_confidence.is_some_and(|c| confidence(p) < c) {
            continue;
        }
        let mut out = sample.clone();
        out.correct_label(Label::from(p >= threshold), source.clone())?;
        scored.push(p);
        labeled.push(out);
    }

    let evaluation = match labeled.iter().map(|s| s.true_label).collect::<Option<Vec<_>>>() {
        Some(truth) if !truth.is_empty() => Some(evaluate_scores(&scored, &truth, threshold)?),
        _ => None,
    };
    let report = AutoLabelReport {
        model_checksum: checksum.clone(),
        threshold,
        min_confidence,
        total: samples.len(),
        labeled: labeled.len(),
        skipped: samples.len() - labeled.len(),
        failures,
        zero_coverage: labeled.is_empty(),
        evaluation,
    };
    Ok((
        ManifestDelta {
            model_checksum: checksum,
            samples: labeled,
        },
        report,
    ))
}

/// Writes the delta as a manifest; every row carries
/// `label_source=autolabel:<checksum>`.
pub fn export_labeled(
    delta: &ManifestDelta,
    class_names: [String; 2],
    source_root: PathBuf,
    path: &Path,
) -> Result<()> {
    if delta.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let manifest = DatasetManifest::new(
        delta.samples.clone(),
        class_names,
        source_root,
        chrono::DateTime::UNIX_EPOCH,
    )?;
    save_manifest(&manifest, path)
}

/// Applies machine labels to a manifest. Human and oracle labels win; a
/// delta that would replace one is rejected before anything changes.
pub fn merge_delta(manifest: &mut DatasetManifest, delta: &ManifestDelta) -> Result<()> {
    let mut staged = Vec::with_capacity(delta.samples.len());
    for s in &delta.samples {
        let (label, source) = match (s.assigned_label, &s.label_source) {
            (Some(l), Some(src)) => (l, src.clone()),
            _ => return Err(Error::MissingLabel(s.id.clone())),
        };
        let mut target = manifest
            .get(&s.id)
            .ok_or_else(|| Error::NotFound(format!("sample `{}`", s.id)))?
            .clone();
        target.correct_label(label, source)?;
        staged.push(target);
    }
    for t in staged {
        let slot = manifest.get_mut(&t.id).expect("checked above");
        *slot = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{build_model, ModelConfig};
    use crate::dataset::{load_manifest, Split};
    use crate::synthetic::tiny_dataset;

    fn model() -> Model {
        build_model(&ModelConfig::compact(32, 2, (4, 3)), 3).unwrap()
    }

    #[test]
    fn labels_everything_without_a_gate() {
        let (_d, m) = tiny_dataset(3);
        let test = m.split_samples(Split::Test);
        let (delta, report) = autolabel(&model(), &test, 0.5, None).unwrap();
        assert_eq!((report.total, report.labeled, report.skipped), (4, 4, 0));
        assert!(!report.zero_coverage);
        let eval = report.evaluation.unwrap();
        assert_eq!(eval.cm.total(), 4);
        for s in &delta.samples {
            assert_eq!(s.label_source, Some(LabelSource::Autolabel(delta.model_checksum.clone())));
        }
    }

    #[test]
    fn full_confidence_gate_skips_non_saturated_predictions() {
        let (_d, m) = tiny_dataset(3);
        let test = m.split_samples(Split::Test);
        let (delta, report) = autolabel(&model(), &test, 0.5, Some(1.0)).unwrap();
        assert!(delta.samples.is_empty());
        assert_eq!(report.skipped, 4);
        assert!(report.zero_coverage);
        assert!(report.evaluation.is_none());
        assert!(matches!(autolabel(&model(), &test, 0.5, Some(0.5)), Err(Error::Range(_))));
    }

    #[test]
    fn decode_failures_are_recorded_and_counted_as_skipped() {
        let (dir, m) = tiny_dataset(3);
        let mut test = m.split_samples(Split::Test);
        std::fs::write(&test[0].image_ref, b"not an image").unwrap();
        test[1].image_ref = dir.path().join("missing.png");
        let (_, report) = autolabel(&model(), &test, 0.5, None).unwrap();
        assert_eq!(report.failures.len(), 2);
        assert_eq!(report.labeled + report.skipped, report.total);
        assert_eq!(report.failures[0].sample_id, test[0].id);
    }

    #[test]
    fn human_labels_are_never_overwritten() {
        let (_d, m) = tiny_dataset(3);
        let mut test = m.split_samples(Split::Test);
        test[0].assign_label(Label::Zero, LabelSource::Human).unwrap();
        assert!(matches!(
            autolabel(&model(), &test, 0.5, None),
            Err(Error::LabelConflict { .. })
        ));

        let mut manifest = m.clone();
        let id = test[0].id.clone();
        manifest.assign_label(&id, Label::Zero, LabelSource::Oracle).unwrap();
        let (delta, _) = autolabel(&model(), &test[1..], 0.5, None).unwrap();
        let mut with_conflict = delta.clone();
        let mut clash = test[0].clone();
        clash.label_source = Some(LabelSource::Autolabel("x".into()));
        with_conflict.samples.push(clash);
        let before = manifest.clone();
        assert!(matches!(
            merge_delta(&mut manifest, &with_conflict),
            Err(Error::LabelConflict { .. })
        ));
        assert_eq!(manifest, before);
        merge_delta(&mut manifest, &delta).unwrap();
        assert_eq!(manifest.get(&id).unwrap().label_source, Some(LabelSource::Oracle));
    }

    #[test]
    fn export_round_trips_and_is_reproducible() {
        let (dir, m) = tiny_dataset(3);
        let test = m.split_samples(Split::Test);
        let (delta, _) = autolabel(&model(), &test, 0.5, None).unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        export_labeled(&delta, m.class_names.clone(), m.source_root.clone(), &a).unwrap();
        export_labeled(&delta, m.class_names.clone(), m.source_root.clone(), &b).unwrap();
        let text = std::fs::read_to_string(&a).unwrap();
        assert_eq!(text.lines().count(), delta.samples.len() + 1);
        assert!(text.lines().next().unwrap().ends_with(",label_source"));
        assert!(text.contains(&format!("autolabel:{}", delta.model_checksum)));
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = load_manifest(&a).unwrap();
        assert_eq!(back.samples(), delta.samples.as_slice());

        let empty = ManifestDelta {
            model_checksum: "x".into(),
            samples: vec![],
        };
        assert!(matches!(
            export_labeled(&empty, m.class_names.clone(), m.source_root.clone(), &a),
            Err(Error::EmptyDataset)
        ));
    }
}
