use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    KFold { folds: usize },
    /// Two folds: fold 0 is the test half, fold 1 the training half.
    TrainTestHalf,
}

/// Immutable assignment of sample ids to folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub fold_count: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl SplitSpec {
    pub fn fold(&self, k: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == k)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// `(train, test)` ids with fold `k` held out.
    pub fn train_test(&self, k: usize) -> (Vec<&str>, Vec<&str>) {
        let (test, train): (Vec<_>, Vec<_>) = self.assignments.iter().partition(|(_, &f)| f == k);
        (
            train.into_iter().map(|(id, _)| id.as_str()).collect(),
            test.into_iter().map(|(id, _)| id.as_str()).collect(),
        )
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.fold_count];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Deterministic partition of `ids` into folds.
///
/// Ids are sorted before shuffling so the result depends only on the id set,
/// the mode and the seed.
pub fn make_splits<S: AsRef<str>>(ids: &[S], mode: SplitMode, seed: u64) -> Result<SplitSpec> {
    let fold_count = match mode {
        SplitMode::KFold { folds } => folds,
        SplitMode::TrainTestHalf => 2,
    };
    if fold_count == 0 {
        return Err(CoreError::Config("fold count must be positive".into()));
    }
    let unique: BTreeSet<&str> = ids.iter().map(AsRef::as_ref).collect();
    if unique.len() != ids.len() {
        return Err(CoreError::Config("duplicate sample ids".into()));
    }
    if ids.len() < fold_count {
        return Err(CoreError::TooFewSamples {
            needed: fold_count,
            got: ids.len(),
        });
    }
    let mut order: Vec<&str> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % fold_count))
        .collect();
    Ok(SplitSpec {
        mode,
        fold_count,
        seed,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:04}")).collect()
    }

    #[test]
    fn thirty_ids_five_folds_of_six() {
        let s = make_splits(&ids(30), SplitMode::KFold { folds: 5 }, 7).unwrap();
        assert_eq!(s.fold_sizes(), vec![6; 5]);
    }

    #[test]
    fn half_split_of_650() {
        let s = make_splits(&ids(650), SplitMode::TrainTestHalf, 1).unwrap();
        let (train, test) = s.train_test(0);
        assert_eq!((train.len(), test.len()), (325, 325));
    }

    #[test]
    fn too_few_ids() {
        assert!(matches!(
            make_splits(&ids(4), SplitMode::KFold { folds: 5 }, 0),
            Err(CoreError::TooFewSamples { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn reproducible_and_order_independent() {
        let a = make_splits(&ids(23), SplitMode::KFold { folds: 4 }, 42).unwrap();
        let mut rev = ids(23);
        rev.reverse();
        let b = make_splits(&rev, SplitMode::KFold { folds: 4 }, 42).unwrap();
        assert_eq!(a, b);
        let sizes = a.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let c = make_splits(&ids(23), SplitMode::KFold { folds: 4 }, 43).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }
}
