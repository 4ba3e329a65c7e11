//! Subject curriculum: partitioning subjects into K specialization subsets
//! and the per-sample weighted classification loss.
//!
//! Model k keeps full weight (beta = 1) on samples from its own subset S_k;
//! samples from other subjects start at full weight and decay linearly to
//! zero over training (beta = alpha = 1 - epoch / n_epochs), so each model
//! gradually specializes while the ensemble stays diverse.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Disjoint assignment of subject ids to K specialization subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectPartition {
    n_subsets: usize,
    assignment: BTreeMap<u32, usize>,
}

impl SubjectPartition {
    /// Randomly assigns each subject to one of `k` subsets with uniform
    /// probability, redrawing until every subset is non-empty.
    pub fn make<R: Rng>(subject_ids: &[u32], k: usize, rng: &mut R) -> Result<Self> {
        if k < 2 {
            return Err(Error::Parameter(format!("partition needs K >= 2, got {k}")));
        }
        let mut ids: Vec<u32> = subject_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if k > ids.len() {
            return Err(Error::InfeasiblePartition(format!(
                "cannot fill {k} subsets from {} subjects",
                ids.len()
            )));
        }
        // Uniform assignment leaves a subset empty with decent probability
        // at small N, so redraw; the attempt cap only guards pathological K.
        for _ in 0..100_000 {
            let draws: Vec<usize> = ids.iter().map(|_| rng.random_range(0..k)).collect();
            let mut seen = vec![false; k];
            for &d in &draws {
                seen[d] = true;
            }
            if seen.iter().all(|&s| s) {
                let assignment = ids.iter().copied().zip(draws).collect();
                return Ok(SubjectPartition { n_subsets: k, assignment });
            }
        }
        Err(Error::InfeasiblePartition(format!(
            "no non-empty assignment of {} subjects to {k} subsets found",
            ids.len()
        )))
    }

    pub fn n_subsets(&self) -> usize {
        self.n_subsets
    }

    pub fn n_subjects(&self) -> usize {
        self.assignment.len()
    }

    /// Subset index of a subject.
    pub fn subset_of(&self, subject: u32) -> Result<usize> {
        self.assignment
            .get(&subject)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("subject {subject} not in partition")))
    }

    /// Subjects assigned to subset `k`, ascending.
    pub fn members(&self, k: usize) -> Vec<u32> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == k)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn assignment(&self) -> &BTreeMap<u32, usize> {
        &self.assignment
    }
}

/// Training progress: epoch position within a fixed horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    n_epochs: usize,
    current_epoch: usize,
}

impl Schedule {
    /// Schedule at `current_epoch` of `n_epochs` (0-indexed, evaluated at
    /// epoch start; `current_epoch == n_epochs` marks the end of training).
    pub fn new(n_epochs: usize, current_epoch: usize) -> Result<Self> {
        if n_epochs == 0 {
            return Err(Error::Parameter("n_epochs must be positive".into()));
        }
        if current_epoch > n_epochs {
            return Err(Error::Contract(format!(
                "epoch {current_epoch} outside [0, {n_epochs}]"
            )));
        }
        Ok(Schedule { n_epochs, current_epoch })
    }

    pub fn n_epochs(&self) -> usize {
        self.n_epochs
    }

    pub fn current_epoch(&self) -> usize {
        self.current_epoch
    }

    /// Decay coefficient `1 - epoch / n_epochs`, in [0, 1].
    pub fn alpha(&self) -> f64 {
        1.0 - self.current_epoch as f64 / self.n_epochs as f64
    }
}

/// Per-sample curriculum weight: 1 inside S_k, alpha outside.
pub fn beta(
    subject: u32,
    k: usize,
    partition: &SubjectPartition,
    schedule: &Schedule,
) -> Result<f64> {
    if k >= partition.n_subsets() {
        return Err(Error::Parameter(format!(
            "subset index {k} out of range for {} subsets",
            partition.n_subsets()
        )));
    }
    Ok(if partition.subset_of(subject)? == k {
        1.0
    } else {
        schedule.alpha()
    })
}

/// Subject-weighted classification loss.
///
/// For each model k the per-sample cross-entropies are scaled by beta and
/// averaged over the batch; the total is the sum over models. Returns the
/// K per-model scalars and the total, all as graph nodes.
pub fn loss_subj(
    graph: &mut Graph,
    scores: &[Var],
    labels: Var,
    subjects: &[u32],
    partition: &SubjectPartition,
    schedule: &Schedule,
) -> Result<(Vec<Var>, Var)> {
    if scores.len() != partition.n_subsets() {
        return Err(Error::Contract(format!(
            "{} score tensors for {} subsets",
            scores.len(),
            partition.n_subsets()
        )));
    }
    let b = graph.value(labels).shape()[0];
    if subjects.len() != b {
        return Err(Error::Contract(format!(
            "{} subject ids for batch of {b}",
            subjects.len()
        )));
    }
    let mut per_model = Vec::with_capacity(scores.len());
    for (k, &s) in scores.iter().enumerate() {
        let weights: Vec<f64> = subjects
            .iter()
            .map(|&sub| beta(sub, k, partition, schedule))
            .collect::<Result<_>>()?;
        let w = graph.constant(Tensor::from_vec(weights));
        let ce = graph.cross_entropy_per_sample(s, labels)?;
        let weighted = graph.mul(ce, w)?;
        per_model.push(graph.mean_all(weighted));
    }
    let mut total = per_model[0];
    for &l in &per_model[1..] {
        total = graph.add(total, l)?;
    }
    Ok((per_model, total))
}
