//! Intra-ensemble distillation: each model is pulled toward the gradient-
//! detached softmax of its peers' averaged scores, but only on samples
//! outside its own specialization subset, with a weight ramping from 0 to 1
//! as the curriculum decays.

use crate::curriculum::{Schedule, SubjectPartition};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda_subj: f64,
    pub lambda_distill: f64,
}

impl DistillConfig {
    /// Default weighting: lambda_subj tracks the ensemble size,
    /// lambda_distill = 0.7.
    pub fn for_k(k: usize) -> Self {
        DistillConfig { lambda_subj: k as f64, lambda_distill: 0.7 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_subj < 0.0 || self.lambda_distill < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda_subj={} lambda_distill={}",
                self.lambda_subj, self.lambda_distill
            )));
        }
        Ok(())
    }
}

/// Scalar snapshot of one batch's loss composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_model_subj: Vec<f64>,
    pub per_model_distill: Vec<f64>,
    pub total_subj: f64,
    pub total_distill: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Graph nodes of the composed objective for one batch.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    /// `lambda_subj * total_subj + lambda_distill * total_distill`.
    pub total: Var,
    pub per_model_subj: Vec<Var>,
    pub per_model_distill: Vec<Var>,
    pub total_subj: Var,
    pub total_distill: Var,
    pub alpha: f64,
}

impl CompositeLoss {
    pub fn breakdown(&self, graph: &Graph) -> LossBreakdown {
        let read = |v: Var| graph.value(v).item().expect("loss nodes are scalar");
        LossBreakdown {
            per_model_subj: self.per_model_subj.iter().map(|&v| read(v)).collect(),
            per_model_distill: self.per_model_distill.iter().map(|&v| read(v)).collect(),
            total_subj: read(self.total_subj),
            total_distill: read(self.total_distill),
            total: read(self.total),
            alpha: self.alpha,
        }
    }
}

/// Soft target for model k: softmax of the mean of the other K-1 raw score
/// tensors, wrapped in stop_gradient so no gradient reaches the peers.
pub fn pseudolabel(graph: &mut Graph, scores: &[Var], k: usize) -> Result<Var> {
    if scores.len() < 2 {
        return Err(Error::Contract(
            "pseudolabels need at least two models".into(),
        ));
    }
    if k >= scores.len() {
        return Err(Error::Parameter(format!(
            "model index {k} out of range for {} models",
            scores.len()
        )));
    }
    let others: Vec<Var> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, &v)| v)
        .collect();
    let mean = graph.mean_many(&others)?;
    let soft = graph.softmax(mean, 1)?;
    Ok(graph.stop_gradient(soft))
}

/// Distillation loss.
///
/// For each model k: cross-entropy between its scores and its pseudolabel,
/// averaged over the samples outside S_k only (zero when a batch has none),
/// scaled by `1 - alpha`. Total is the sum over models.
pub fn loss_distill(
    graph: &mut Graph,
    scores: &[Var],
    subjects: &[u32],
    partition: &SubjectPartition,
    schedule: &Schedule,
) -> Result<(Vec<Var>, Var)> {
    if scores.len() < 2 {
        return Err(Error::Contract(
            "distillation needs at least two models".into(),
        ));
    }
    let targets: Vec<Var> = (0..scores.len())
        .map(|k| pseudolabel(graph, scores, k))
        .collect::<Result<_>>()?;
    loss_distill_with_targets(graph, scores, &targets, subjects, partition, schedule)
}

/// [`loss_distill`] against caller-supplied target tensors instead of
/// freshly computed pseudolabels. Gradient checks use this with targets
/// frozen as constants, which matches the live loss's differentiation
/// semantics (pseudolabels sit behind stop_gradient).
pub fn loss_distill_with_targets(
    graph: &mut Graph,
    scores: &[Var],
    targets: &[Var],
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
    if targets.len() != scores.len() {
        return Err(Error::Contract(format!(
            "{} target tensors for {} models",
            targets.len(),
            scores.len()
        )));
    }
    let b = graph.value(scores[0]).shape()[0];
    if subjects.len() != b {
        return Err(Error::Contract(format!(
            "{} subject ids for batch of {b}",
            subjects.len()
        )));
    }
    let ramp = 1.0 - schedule.alpha();
    let mut per_model = Vec::with_capacity(scores.len());
    for (k, &s) in scores.iter().enumerate() {
        let mask: Vec<f64> = subjects
            .iter()
            .map(|&sub| Ok(if partition.subset_of(sub)? == k { 0.0 } else { 1.0 }))
            .collect::<Result<_>>()?;
        let masked_in = mask.iter().filter(|&&m| m == 1.0).count();
        if masked_in == 0 {
            per_model.push(graph.constant_scalar(0.0));
            continue;
        }
        let ce = graph.cross_entropy_per_sample(s, targets[k])?;
        let mv = graph.constant(Tensor::from_vec(mask));
        let masked = graph.mul(ce, mv)?;
        let sum = graph.sum_all(masked);
        let mean = graph.scale(sum, 1.0 / masked_in as f64);
        per_model.push(graph.scale(mean, ramp));
    }
    let mut total = per_model[0];
    for &l in &per_model[1..] {
        total = graph.add(total, l)?;
    }
    Ok((per_model, total))
}

/// Full objective: `lambda_subj * L_subj_total + lambda_distill *
/// L_distill_total`, with both constituents exposed for logging.
pub fn loss_total(
    graph: &mut Graph,
    scores: &[Var],
    labels: Var,
    subjects: &[u32],
    partition: &SubjectPartition,
    schedule: &Schedule,
    cfg: &DistillConfig,
) -> Result<CompositeLoss> {
    cfg.validate()?;
    let (per_model_subj, total_subj) =
        crate::curriculum::loss_subj(graph, scores, labels, subjects, partition, schedule)?;
    let (per_model_distill, total_distill) =
        loss_distill(graph, scores, subjects, partition, schedule)?;
    let ws = graph.scale(total_subj, cfg.lambda_subj);
    let wd = graph.scale(total_distill, cfg.lambda_distill);
    let total = graph.add(ws, wd)?;
    Ok(CompositeLoss {
        total,
        per_model_subj,
        per_model_distill,
        total_subj,
        total_distill,
        alpha: schedule.alpha(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Partition of subjects 0..n where subject s belongs to subset s % k.
    fn round_robin(n: u32, k: usize) -> SubjectPartition {
        // Drawn rather than constructed: redraw seeds until the assignment
        // is the round-robin one we want for readable tests.
        for seed in 0u64.. {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<u32> = (0..n).collect();
            let p = SubjectPartition::make(&ids, k, &mut rng).unwrap();
            if (0..n).all(|s| p.subset_of(s).unwrap() == (s as usize) % k) {
                return p;
            }
        }
        unreachable!()
    }

    #[test]
    fn pseudolabel_uniform_for_zero_scores() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let pl = pseudolabel(&mut g, &[a, b], 0).unwrap();
        assert_eq!(g.value(pl).data(), &[0.5, 0.5]);
    }

    #[test]
    fn pseudolabel_averages_before_softmax() {
        let mut g = Graph::new();
        let own = g.constant(Tensor::new(vec![1, 2], vec![9.0, 9.0]).unwrap());
        let p1 = g.constant(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
        let p2 = g.constant(Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap());
        let pl = pseudolabel(&mut g, &[own, p1, p2], 0).unwrap();
        // mean of peers = [1,1] -> softmax = [0.5,0.5]
        assert_eq!(g.value(pl).data(), &[0.5, 0.5]);
    }

    #[test]
    fn pseudolabel_of_identical_models_is_their_softmax() {
        let mut g = Graph::new();
        let s = Tensor::new(vec![1, 3], vec![0.2, -1.0, 0.5]).unwrap();
        let vars: Vec<Var> = (0..3).map(|_| g.constant(s.clone())).collect();
        let direct = g.softmax(vars[0], 1).unwrap();
        for k in 0..3 {
            let pl = pseudolabel(&mut g, &vars, k).unwrap();
            assert_eq!(g.value(pl).data(), g.value(direct).data());
        }
    }

    #[test]
    fn pseudolabel_requires_two_models() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert!(matches!(pseudolabel(&mut g, &[a], 0), Err(Error::Contract(_))));
    }

    fn random_scores(
        g: &mut Graph,
        k: usize,
        b: usize,
        n: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Vec<Var> {
        (0..k)
            .map(|_| {
                let d: Vec<f64> = (0..b * n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let t = Tensor::new(vec![b, n], d).unwrap();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    #[test]
    fn distill_total_is_exactly_zero_at_epoch_start() {
        let p = round_robin(4, 2);
        let s = Schedule::new(40, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let scores = random_scores(&mut g, 2, 6, 3, &mut rng, false);
        let subjects: Vec<u32> = (0..6).map(|i| (i % 4) as u32).collect();
        let (_, total) = loss_distill(&mut g, &scores, &subjects, &p, &s).unwrap();
        assert_eq!(g.value(total).item().unwrap(), 0.0);
    }

    #[test]
    fn own_subset_batch_contributes_nothing() {
        let p = round_robin(4, 2);
        let s = Schedule::new(40, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let scores = random_scores(&mut g, 2, 4, 2, &mut rng, false);
        // Subjects 0 and 2 are subset 0's own: model 0 gets masked out fully.
        let subjects = vec![0, 2, 0, 2];
        let (per_model, _) = loss_distill(&mut g, &scores, &subjects, &p, &s).unwrap();
        assert_eq!(g.value(per_model[0]).item().unwrap(), 0.0);
        assert!(g.value(per_model[1]).item().unwrap() > 0.0);
    }

    #[test]
    fn final_epoch_equal_scores_match_hand_value() {
        let p = round_robin(2, 2);
        let s = Schedule::new(40, 40).unwrap();
        let mut g = Graph::new();
        let sc = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let scores = vec![g.constant(sc.clone()), g.constant(sc)];
        // The single sample comes from subject 1 (subset 1), so model 0
        // distills on it while model 1 masks it out.
        let (per_model, _) = loss_distill(&mut g, &scores, &[1], &p, &s).unwrap();
        // CE([1,0], softmax([1,0])): z = ln(e + 1), target = [e, 1]/(e+1).
        let e = std::f64::consts::E;
        let z = (e + 1.0f64).ln();
        let want = e / (e + 1.0) * (z - 1.0) + 1.0 / (e + 1.0) * z;
        assert!((g.value(per_model[0]).item().unwrap() - want).abs() < 1e-12);
        assert_eq!(g.value(per_model[1]).item().unwrap(), 0.0);
    }

    #[test]
    fn ramp_scales_linearly_and_monotonically() {
        let p = round_robin(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let subjects = vec![1, 0, 3, 2, 1, 0];
        let value_at = |epoch: usize| -> Vec<f64> {
            let s = Schedule::new(40, epoch).unwrap();
            let mut g = Graph::new();
            let a = g.constant(Tensor::new(vec![6, 2], raw.clone()).unwrap());
            let b = g.constant(Tensor::new(vec![6, 2], raw.iter().map(|v| -v).collect()).unwrap());
            let (per_model, total) = loss_distill(&mut g, &[a, b], &subjects, &p, &s).unwrap();
            let mut out: Vec<f64> =
                per_model.iter().map(|&v| g.value(v).item().unwrap()).collect();
            out.push(g.value(total).item().unwrap());
            out
        };
        let full = value_at(40);
        let mut last_total = -1.0;
        for epoch in 0..=40 {
            let vals = value_at(epoch);
            let ramp = epoch as f64 / 40.0;
            for (v, f) in vals.iter().zip(&full) {
                assert!((v - ramp * f).abs() < 1e-12 * f.abs().max(1.0));
            }
            let total = *vals.last().unwrap();
            assert!(total >= last_total - 1e-15);
            last_total = total;
        }
    }

    #[test]
    fn mask_reduction_ignores_masked_out_samples_exactly() {
        let p = round_robin(4, 2);
        let s = Schedule::new(40, 25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Mixed batch: samples 1 and 3 belong to other subsets for model 0.
        let subjects_full = [0u32, 1, 2, 3];
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..8).map(|_| rng.random::<f64>()).collect())
            .collect();
        let run = |keep: &[usize]| -> f64 {
            let mut g = Graph::new();
            let pick = |m: usize| -> Tensor {
                let d: Vec<f64> = keep
                    .iter()
                    .flat_map(|&i| rows[m][i * 2..i * 2 + 2].to_vec())
                    .collect();
                Tensor::new(vec![keep.len(), 2], d).unwrap()
            };
            let a = g.constant(pick(0));
            let b = g.constant(pick(1));
            let subj: Vec<u32> = keep.iter().map(|&i| subjects_full[i]).collect();
            let (per_model, _) = loss_distill(&mut g, &[a, b], &subj, &p, &s).unwrap();
            g.value(per_model[0]).item().unwrap()
        };
        let mixed = run(&[0, 1, 2, 3]);
        let only_masked_in = run(&[1, 3]);
        assert_eq!(mixed.to_bits(), only_masked_in.to_bits());
    }

    #[test]
    fn stop_gradient_blocks_peer_gradients() {
        let p = round_robin(3, 3);
        let s = Schedule::new(40, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let scores = random_scores(&mut g, 3, 5, 2, &mut rng, true);
        let subjects = vec![1, 2, 0, 1, 2];
        let (per_model, _) = loss_distill(&mut g, &scores, &subjects, &p, &s).unwrap();
        g.backward(per_model[0]).unwrap();
        assert!(g.grad(scores[0]).unwrap().data().iter().any(|&v| v != 0.0));
        for (j, &peer) in scores.iter().enumerate().skip(1) {
            assert!(
                g.grad(peer).unwrap().data().iter().all(|&v| v == 0.0),
                "gradient leaked into peer {j}"
            );
        }
    }

    #[test]
    fn total_composition_is_bitwise_exact() {
        let p = round_robin(4, 2);
        let s = Schedule::new(40, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let scores = random_scores(&mut g, 2, 6, 3, &mut rng, false);
        let labels = {
            let mut lab = vec![0.0; 18];
            for bi in 0..6 {
                lab[bi * 3 + rng.random_range(0..3)] = 1.0;
            }
            g.constant(Tensor::new(vec![6, 3], lab).unwrap())
        };
        let subjects: Vec<u32> = (0..6).map(|i| (i % 4) as u32).collect();
        let cfg = DistillConfig::for_k(2);
        let out = loss_total(&mut g, &scores, labels, &subjects, &p, &s, &cfg).unwrap();
        let bd = out.breakdown(&g);
        let recomposed = cfg.lambda_subj * bd.total_subj + cfg.lambda_distill * bd.total_distill;
        assert_eq!(bd.total.to_bits(), recomposed.to_bits());
        assert_eq!(bd.per_model_subj.len(), 2);
        assert_eq!(bd.per_model_distill.len(), 2);
    }

    #[test]
    fn zero_lambda_distill_reduces_to_weighted_subj() {
        let p = round_robin(4, 2);
        let s = Schedule::new(40, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let scores = random_scores(&mut g, 2, 5, 2, &mut rng, false);
        let labels = {
            let mut lab = vec![0.0; 10];
            for bi in 0..5 {
                lab[bi * 2 + rng.random_range(0..2)] = 1.0;
            }
            g.constant(Tensor::new(vec![5, 2], lab).unwrap())
        };
        let subjects = vec![0, 1, 2, 3, 0];
        let cfg = DistillConfig { lambda_subj: 2.0, lambda_distill: 0.0 };
        let out = loss_total(&mut g, &scores, labels, &subjects, &p, &s, &cfg).unwrap();
        let bd = out.breakdown(&g);
        assert_eq!(bd.total.to_bits(), (2.0 * bd.total_subj).to_bits());
    }

    #[test]
    fn epoch_zero_total_is_k_times_plain_ce_sum() {
        let p = round_robin(4, 2);
        let s = Schedule::new(40, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let scores = random_scores(&mut g, 2, 4, 2, &mut rng, false);
        let mut lab = vec![0.0; 8];
        for bi in 0..4 {
            lab[bi * 2 + rng.random_range(0..2)] = 1.0;
        }
        let labels = g.constant(Tensor::new(vec![4, 2], lab).unwrap());
        let subjects = vec![0, 1, 2, 3];
        let cfg = DistillConfig::for_k(2);
        let out = loss_total(&mut g, &scores, labels, &subjects, &p, &s, &cfg).unwrap();
        let bd = out.breakdown(&g);

        let ce0 = g.cross_entropy(scores[0], labels).unwrap();
        let ce1 = g.cross_entropy(scores[1], labels).unwrap();
        let plain = g.add(ce0, ce1).unwrap();
        let want = 2.0 * g.value(plain).item().unwrap();
        assert_eq!(bd.total.to_bits(), want.to_bits());
        assert_eq!(bd.total_distill, 0.0);
    }
}
