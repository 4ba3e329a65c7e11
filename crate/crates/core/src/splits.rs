//! Subject-level evaluation splits: k-fold cross-validation over subjects
//! and leave-one-subject-out, both with seeded shuffling so plans are
//! reproducible.

use crate::error::{Error, Result};
use rand::prelude::*;
use serde::{Deserialize, Serialize};

/// How a [`SplitPlan`] was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitMode {
    /// k-fold cross-validation over subjects; `fold_index` is the test fold.
    Cv { n_folds: usize, fold_index: usize },
    /// Leave-one-subject-out with the named held-out subject.
    Loso { test_subject: u32 },
}

/// Disjoint train/validation/test subject lists covering every subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitPlan {
    /// Checks pairwise disjointness and coverage of `subjects`.
    pub fn validate(&self, subjects: &[u32]) -> Result<()> {
        let mut all: Vec<u32> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .copied()
            .collect();
        all.sort_unstable();
        let mut expected = dedup_sorted(subjects);
        expected.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("split lists overlap".into()));
        }
        if all != expected {
            return Err(Error::Contract("split does not cover all subjects exactly".into()));
        }
        Ok(())
    }
}

fn dedup_sorted(subjects: &[u32]) -> Vec<u32> {
    let mut s = subjects.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// Cross-validation split: subjects are shuffled once, cut into `n_folds`
/// near-equal folds (sizes differ by at most one), the test set is fold
/// `fold_index`, validation is the cyclically next fold, and training is
/// everything else.
pub fn split_cv(
    subjects: &[u32],
    n_folds: usize,
    fold_index: usize,
    rng: &mut impl Rng,
) -> Result<SplitPlan> {
    let subjects = dedup_sorted(subjects);
    if n_folds < 2 {
        return Err(Error::Parameter(format!("{n_folds} folds cannot form a split")));
    }
    if subjects.len() < n_folds {
        return Err(Error::Parameter(format!(
            "{} subjects cannot fill {n_folds} folds",
            subjects.len()
        )));
    }
    if fold_index >= n_folds {
        return Err(Error::Parameter(format!(
            "fold index {fold_index} out of range for {n_folds} folds"
        )));
    }
    let mut shuffled = subjects.clone();
    shuffled.shuffle(rng);
    let base = shuffled.len() / n_folds;
    let extra = shuffled.len() % n_folds;
    let mut folds: Vec<Vec<u32>> = Vec::with_capacity(n_folds);
    let mut at = 0;
    for f in 0..n_folds {
        let size = base + usize::from(f < extra);
        folds.push(shuffled[at..at + size].to_vec());
        at += size;
    }
    let val_index = (fold_index + 1) % n_folds;
    let mut plan = SplitPlan {
        mode: SplitMode::Cv { n_folds, fold_index },
        train: folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold_index && f != val_index)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect(),
        val: folds[val_index].clone(),
        test: folds[fold_index].clone(),
    };
    plan.train.sort_unstable();
    plan.val.sort_unstable();
    plan.test.sort_unstable();
    Ok(plan)
}

/// Leave-one-subject-out split: the named subject is the test set and the
/// rest are split 80/20 into train/validation (validation gets at least one
/// subject).
pub fn split_loso(subjects: &[u32], test_subject: u32, rng: &mut impl Rng) -> Result<SplitPlan> {
    let subjects = dedup_sorted(subjects);
    if subjects.len() < 3 {
        return Err(Error::Parameter(format!(
            "{} subjects cannot support train/val/test",
            subjects.len()
        )));
    }
    if !subjects.contains(&test_subject) {
        return Err(Error::Lookup(format!("subject {test_subject} not in corpus")));
    }
    let mut rest: Vec<u32> = subjects.iter().copied().filter(|&s| s != test_subject).collect();
    rest.shuffle(rng);
    let n_val = ((0.2 * rest.len() as f64).round() as usize).max(1);
    let mut plan = SplitPlan {
        mode: SplitMode::Loso { test_subject },
        val: rest[..n_val].to_vec(),
        train: rest[n_val..].to_vec(),
        test: vec![test_subject],
    };
    plan.train.sort_unstable();
    plan.val.sort_unstable();
    Ok(plan)
}
