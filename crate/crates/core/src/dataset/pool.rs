use std::collections::BTreeSet;

use indexmap::{IndexMap, IndexSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Label, LabelSource, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub label: Label,
    pub source: LabelSource,
}

/// Partition of the train split into labeled and unlabeled ids.
///
/// Both sides keep insertion order: labeled ids in the order they were
/// labeled, unlabeled ids in manifest order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    labeled: IndexMap<String, LabeledEntry>,
    unlabeled: IndexSet<String>,
}

impl PoolState {
    pub fn labeled(&self) -> &IndexMap<String, LabeledEntry> {
        &self.labeled
    }

    pub fn labeled_ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.labeled.keys().map(String::as_str)
    }

    pub fn unlabeled_ids(&self) -> &IndexSet<String> {
        &self.unlabeled
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_unlabeled(&self, id: &str) -> bool {
        self.unlabeled.contains(id)
    }

    /// Moves every id in `batch` from unlabeled to labeled. Either the whole
    /// batch is applied or nothing is.
    pub fn label_batch(&mut self, batch: &[(String, Label)], source: &LabelSource) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (id, _) in batch {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
            if !self.unlabeled.contains(id) {
                return Err(if self.labeled.contains_key(id) {
                    Error::Conflict(format!("sample `{id}` is already labeled"))
                } else {
                    Error::NotFound(format!("sample `{id}` is not in the training pool"))
                });
            }
        }
        for (id, label) in batch {
            self.unlabeled.shift_remove(id);
            self.labeled.insert(
                id.clone(),
                LabeledEntry {
                    label: *label,
                    source: source.clone(),
                },
            );
        }
        Ok(())
    }

    /// Checks disjointness and that the union is exactly `train_ids`.
    pub fn check_conservation<'a>(&self, train_ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        if let Some(id) = self.labeled.keys().find(|id| self.unlabeled.contains(*id)) {
            return Err(Error::Integrity(format!(
                "sample `{id}` is both labeled and unlabeled"
            )));
        }
        let expected: BTreeSet<&str> = train_ids.into_iter().collect();
        let actual: BTreeSet<&str> = self
            .labeled
            .keys()
            .chain(self.unlabeled.iter())
            .map(String::as_str)
            .collect();
        if expected != actual {
            return Err(Error::Integrity(format!(
                "pool holds {} ids but the train split has {}",
                actual.len(),
                expected.len()
            )));
        }
        Ok(())
    }
}

/// Builds the initial pool over the train split. `seed_size` ids are drawn
/// uniformly without replacement and labeled from ground truth.
pub fn init_pools(manifest: &DatasetManifest, seed_size: usize, rng_seed: u64) -> Result<PoolState> {
    let train: Vec<_> = manifest.split(Split::Train).collect();
    if seed_size > train.len() {
        return Err(Error::Range(format!(
            "seed_size {seed_size} exceeds train split size {}",
            train.len()
        )));
    }
    if seed_size > 0 {
        if let Some(s) = train.iter().find(|s| s.true_label.is_none()) {
            return Err(Error::MissingLabel(s.id.clone()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let picked = rand::seq::index::sample(&mut rng, train.len(), seed_size);
    let mut labeled = IndexMap::with_capacity(seed_size);
    for i in picked.iter() {
        let s = train[i];
        labeled.insert(
            s.id.clone(),
            LabeledEntry {
                label: s.true_label.expect("checked above"),
                source: LabelSource::Oracle,
            },
        );
    }
    let unlabeled = train
        .iter()
        .filter(|s| !labeled.contains_key(&s.id))
        .map(|s| s.id.clone())
        .collect();
    Ok(PoolState { labeled, unlabeled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use chrono::Utc;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn manifest(train: usize) -> DatasetManifest {
        let mut samples: Vec<Sample> = (0..train)
            .map(|i| {
                Sample::new(format!("t{i:04}"), format!("t{i}"), Split::Train)
                    .with_true_label(Label::from(i % 2 == 0))
            })
            .collect();
        samples.push(Sample::new("v0", "v0", Split::Validation).with_true_label(Label::One));
        DatasetManifest::new(samples, ["a".into(), "b".into()], PathBuf::new(), Utc::now()).unwrap()
    }

    #[test]
    fn zero_seed_leaves_everything_unlabeled() {
        let m = manifest(2000);
        let pool = init_pools(&m, 0, 1).unwrap();
        assert_eq!(pool.labeled_count(), 0);
        assert_eq!(pool.unlabeled_count(), 2000);
    }

    #[test]
    fn full_seed_empties_unlabeled() {
        let m = manifest(40);
        let pool = init_pools(&m, 40, 1).unwrap();
        assert_eq!(pool.unlabeled_count(), 0);
        assert!(pool
            .labeled()
            .iter()
            .all(|(id, e)| m.get(id).unwrap().true_label == Some(e.label)));
    }

    #[test]
    fn seeding_is_deterministic() {
        let m = manifest(100);
        assert_eq!(init_pools(&m, 10, 7).unwrap(), init_pools(&m, 10, 7).unwrap());
        assert_ne!(init_pools(&m, 10, 7).unwrap(), init_pools(&m, 10, 8).unwrap());
    }

    #[test]
    fn oversized_seed_is_range_error() {
        assert!(matches!(init_pools(&manifest(5), 6, 0), Err(Error::Range(_))));
    }

    #[test]
    fn seed_requires_ground_truth() {
        let samples = vec![Sample::new("a", "a", Split::Train)];
        let m = DatasetManifest::new(samples, ["a".into(), "b".into()], PathBuf::new(), Utc::now())
            .unwrap();
        assert!(init_pools(&m, 0, 0).is_ok());
        assert!(matches!(init_pools(&m, 1, 0), Err(Error::MissingLabel(_))));
    }

    #[test]
    fn partial_batch_is_rejected_whole() {
        let m = manifest(10);
        let mut pool = init_pools(&m, 0, 0).unwrap();
        let before = pool.clone();
        let batch = vec![
            ("t0000".to_string(), Label::One),
            ("nope".to_string(), Label::Zero),
        ];
        assert!(pool.label_batch(&batch, &LabelSource::Oracle).is_err());
        assert_eq!(pool, before);
    }

    proptest! {
        #[test]
        fn conservation_holds_under_any_submission_sequence(
            seed in 0u64..1000,
            seed_size in 0usize..10,
            chunks in proptest::collection::vec(1usize..6, 0..10),
        ) {
            let m = manifest(30);
            let train_ids: Vec<&str> = m.split(Split::Train).map(|s| s.id.as_str()).collect();
            let mut pool = init_pools(&m, seed_size, seed).unwrap();
            pool.check_conservation(train_ids.iter().copied()).unwrap();
            for k in chunks {
                let batch: Vec<(String, Label)> = pool
                    .unlabeled_ids()
                    .iter()
                    .take(k)
                    .map(|id| (id.clone(), Label::Zero))
                    .collect();
                if batch.is_empty() {
                    break;
                }
                let before = pool.labeled_count();
                pool.label_batch(&batch, &LabelSource::Human).unwrap();
                prop_assert_eq!(pool.labeled_count(), before + batch.len());
                prop_assert_eq!(pool.total(), 30);
                pool.check_conservation(train_ids.iter().copied()).unwrap();
            }
        }
    }
}
