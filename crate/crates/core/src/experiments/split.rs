//! Patient-wise fold assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Which fold each patient belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSplit {
    folds: usize,
    assignment: BTreeMap<String, usize>,
}

/// Train/validation/test patients of one fold.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Partition {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Shuffle the distinct patient ids with `seed` and deal them round-robin
/// into `folds` folds. Duplicate ids (both hips of a patient) collapse, so a
/// patient's hips always share a fold.
pub fn split_patientwise<S: AsRef<str>>(patient_ids: &[S], folds: usize, seed: u64) -> Result<PatientSplit> {
    if folds < 2 {
        return Err(Error::Input(format!("need at least 2 folds, got {folds}")));
    }
    let unique: BTreeSet<&str> = patient_ids.iter().map(|s| s.as_ref()).collect();
    if unique.len() < folds {
        return Err(Error::Input(format!(
            "{} patients cannot fill {folds} folds",
            unique.len()
        )));
    }
    let mut ids: Vec<&str> = unique.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = ids.iter().enumerate().map(|(i, id)| (id.to_string(), i % folds)).collect();
    Ok(PatientSplit { folds, assignment })
}

impl PatientSplit {
    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignment.get(patient_id).copied()
    }

    /// Fold used for validation when `fold` is the test fold in `repeat`:
    /// one of the other folds, rotating with the repeat index. With two folds
    /// there is no room for a validation fold.
    pub fn val_fold(&self, fold: usize, repeat: usize) -> Option<usize> {
        let k = self.folds;
        (k > 2).then(|| (fold + 1 + repeat % (k - 1)) % k)
    }

    pub fn partition(&self, fold: usize, repeat: usize) -> Result<Partition> {
        if fold >= self.folds {
            return Err(Error::Input(format!("fold {fold} out of range for {} folds", self.folds)));
        }
        let val_fold = self.val_fold(fold, repeat);
        let mut p = Partition::default();
        for (id, &f) in &self.assignment {
            let set = if f == fold {
                &mut p.test
            } else if Some(f) == val_fold {
                &mut p.val
            } else {
                &mut p.train
            };
            set.insert(id.clone());
        }
        Ok(p)
    }
}

impl Partition {
    /// True when no patient appears in two roles.
    pub fn is_disjoint(&self) -> bool {
        self.train.is_disjoint(&self.val) && self.train.is_disjoint(&self.test) && self.val.is_disjoint(&self.test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn each_patient_tested_once() {
        let s = split_patientwise(&ids(40), 4, 7).unwrap();
        let mut seen = BTreeMap::new();
        for f in 0..4 {
            let p = s.partition(f, 0).unwrap();
            assert!(p.is_disjoint());
            assert_eq!(p.train.len() + p.val.len() + p.test.len(), 40);
            assert_eq!(p.test.len(), 10);
            for id in p.test {
                *seen.entry(id).or_insert(0) += 1;
            }
        }
        assert_eq!(seen.len(), 40);
        assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let a = split_patientwise(&ids(30), 3, 1).unwrap();
        assert_eq!(a, split_patientwise(&ids(30), 3, 1).unwrap());
        assert_ne!(a, split_patientwise(&ids(30), 3, 2).unwrap());
    }

    #[test]
    fn validation_rotates_and_two_folds_have_none() {
        let s = split_patientwise(&ids(12), 4, 0).unwrap();
        let vals: BTreeSet<_> = (0..3).map(|r| s.val_fold(0, r).unwrap()).collect();
        assert_eq!(vals, BTreeSet::from([1, 2, 3]));
        let two = split_patientwise(&ids(12), 2, 0).unwrap();
        assert!(two.partition(0, 0).unwrap().val.is_empty());
    }

    #[test]
    fn duplicate_ids_and_errors() {
        let s = split_patientwise(&["a", "a", "b", "c"], 3, 0).unwrap();
        assert!(s.fold_of("a").is_some());
        assert!(split_patientwise(&["a", "a", "b"], 3, 0).is_err());
        assert!(split_patientwise(&ids(10), 1, 0).is_err());
        assert!(s.partition(5, 0).is_err());
    }
}
