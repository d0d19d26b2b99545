use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

use super::Dataset;

/// Share of the non-test samples (per class) held out for early stopping.
pub const VAL_FRACTION: f64 = 0.1;

/// Sample indices of one leave-one-subject-out fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub subject: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per subject in sorted subject order. Remaining samples are split
/// train/val with a per-class shuffle seeded from `seed` and the subject.
pub fn loso_splits(dataset: &Dataset, seed: u64) -> Result<Vec<Fold>> {
    let subjects = dataset.subjects();
    if subjects.len() < 2 {
        return Err(Error::TooFewSubjects(subjects.len()));
    }
    let n_classes = dataset
        .sequences
        .iter()
        .map(|s| s.label + 1)
        .max()
        .unwrap_or(0)
        .max(dataset.n_classes());
    let mut folds = Vec::with_capacity(subjects.len());
    for subject in subjects {
        let mut rng = rng_for(seed, &format!("val-split/{subject}"));
        let test: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.sequences[i].subject_id == subject)
            .collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in 0..n_classes {
            let mut members: Vec<usize> = (0..dataset.len())
                .filter(|&i| {
                    let s = &dataset.sequences[i];
                    s.subject_id != subject && s.label == class
                })
                .collect();
            members.shuffle(&mut rng);
            let n_val = (members.len() as f64 * VAL_FRACTION).round() as usize;
            val.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        let fold = Fold {
            subject: subject.to_string(),
            train,
            val,
            test,
        };
        check_fold(dataset, &fold)?;
        folds.push(fold);
    }
    Ok(folds)
}

/// Partition and subject-purity check for one fold. Called on every fold
/// before training; a failure here means leakage.
pub fn check_fold(dataset: &Dataset, fold: &Fold) -> Result<()> {
    let leak = |m: String| Err(Error::InvalidArgument(format!("fold {}: {m}", fold.subject)));
    let mut seen = vec![0u8; dataset.len()];
    for &i in fold.train.iter().chain(&fold.val).chain(&fold.test) {
        if i >= dataset.len() {
            return leak(format!("index {i} out of range"));
        }
        seen[i] += 1;
    }
    if let Some(i) = seen.iter().position(|&c| c != 1) {
        return leak(format!("sample {i} appears {} times across train/val/test", seen[i]));
    }
    let test_subjects: BTreeSet<&str> = fold
        .test
        .iter()
        .map(|&i| dataset.sequences[i].subject_id.as_str())
        .collect();
    if test_subjects.len() != 1 || !test_subjects.contains(fold.subject.as_str()) {
        return leak(format!("test set spans subjects {test_subjects:?}"));
    }
    if let Some(&i) = fold
        .train
        .iter()
        .chain(&fold.val)
        .find(|&&i| dataset.sequences[i].subject_id == fold.subject)
    {
        return leak(format!("held-out subject's sample {i} in train/val"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FrameSequence;

    fn ds(subjects: &[(&str, usize)]) -> Dataset {
        let mut sequences = Vec::new();
        for &(s, n) in subjects {
            for i in 0..n {
                sequences.push(FrameSequence {
                    id: format!("{s}/{i}"),
                    frames: vec![],
                    subject_id: s.into(),
                    label: i % 2,
                    onset: 0,
                    apex: 1,
                    offset: 2,
                });
            }
        }
        Dataset {
            sequences,
            class_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn three_subjects_three_folds() {
        let d = ds(&[("a", 4), ("b", 5), ("c", 6)]);
        let folds = loso_splits(&d, 1).unwrap();
        assert_eq!(folds.len(), 3);
        assert_eq!(folds[0].test, vec![0, 1, 2, 3]);
        assert_eq!(folds[2].test.len(), 6);
    }

    #[test]
    fn single_subject_rejected() {
        assert!(matches!(
            loso_splits(&ds(&[("a", 4)]), 0),
            Err(Error::TooFewSubjects(1))
        ));
    }

    #[test]
    fn leakage_detected() {
        let d = ds(&[("a", 4), ("b", 4)]);
        let mut f = loso_splits(&d, 0).unwrap().remove(0);
        f.train.push(f.test[0]);
        assert!(check_fold(&d, &f).is_err());
    }

    #[test]
    fn val_is_stratified_tenth() {
        let d = ds(&[("a", 20), ("b", 20), ("c", 20)]);
        for f in loso_splits(&d, 3).unwrap() {
            assert_eq!(f.val.len(), 4);
            let ones = f.val.iter().filter(|&&i| d.sequences[i].label == 1).count();
            assert_eq!(ones, 2);
        }
    }
}
