//! Training loop: SGD over the ensemble under one of three objectives,
//! per-epoch metrics, best-validation checkpointing, and a run manifest
//! tying the artifacts together.
//!
//! A run is fully determined by (seed, config, corpus, split): every random
//! choice draws from a ChaCha stream derived from the seed, so the metric
//! stream in `metrics.jsonl` and the manifest are bitwise reproducible.
//! Only `wall_clock_secs` in the manifest varies between identical runs.

use crate::corpus::Corpus;
use crate::curriculum::{Schedule, SubjectPartition};
use crate::distill::{loss_total, DistillConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::model::{EnsembleNetwork, ExtractorConfig};
use crate::optim::{sgd_step, SgdState};
use crate::signal::Trial;
use crate::splits::SplitPlan;
use crate::tensor::{argmax, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

// Network init draws from streams 0..=K of the run seed; training draws
// from a far-away block so the two can never collide.
const SHUFFLE_STREAM: u64 = 1 << 32;
const DROPOUT_STREAM: u64 = (1 << 32) + 1;
const PARTITION_STREAM: u64 = (1 << 32) + 2;

pub(crate) fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Which objective the loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Plain sum of per-model cross-entropies; no curriculum, no partition.
    Ce,
    /// Curriculum-weighted loss only: `lambda_subj * L_subj`.
    Subj,
    /// Full objective: `lambda_subj * L_subj + lambda_distill * L_distill`.
    Total,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Ce => "ce",
            LossMode::Subj => "subj",
            LossMode::Total => "total",
        })
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "subj" => Ok(LossMode::Subj),
            "total" => Ok(LossMode::Total),
            other => Err(Error::Parameter(format!(
                "loss mode {other:?} is not one of ce, subj, total"
            ))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for the first half of training.
    pub lr_phase1: f64,
    /// Learning rate for the second half.
    pub lr_phase2: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Ensemble size K.
    pub k: usize,
    pub lambda_distill: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Architecture override; derived from the corpus geometry when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor: Option<ExtractorConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 64,
            lr_phase1: 0.01,
            lr_phase2: 0.002,
            momentum: 0.9,
            weight_decay: 0.01,
            k: 3,
            lambda_distill: 0.7,
            loss_mode: LossMode::Total,
            seed: 7,
            extractor: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (batch norm needs batch statistics)".into(),
            ));
        }
        for (name, v) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("ensemble size k must be positive".into()));
        }
        if self.loss_mode != LossMode::Ce && self.k < 2 {
            return Err(Error::Config(format!(
                "loss mode {} needs k >= 2 (curriculum partitions subjects across models)",
                self.loss_mode
            )));
        }
        if !self.lambda_distill.is_finite() || self.lambda_distill < 0.0 {
            return Err(Error::Config(format!(
                "lambda_distill {} must be non-negative",
                self.lambda_distill
            )));
        }
        if let Some(ext) = &self.extractor {
            ext.validate()?;
        }
        Ok(())
    }

    /// Stepped learning rate: phase 1 for the first half of the epochs,
    /// phase 2 from the midpoint on (60/120 at the default horizon).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.epochs / 2 {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

/// One epoch's log record: a `metrics.jsonl` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    /// Mean optimized objective over the epoch's batches.
    pub train_loss: f64,
    /// Mean unweighted subject-loss component (plain CE sum in `ce` mode).
    pub subj_loss: f64,
    /// Mean unweighted distillation component (zero in `ce` mode).
    pub distill_loss: f64,
    /// Objective value of every batch, in iteration order.
    pub batch_losses: Vec<f64>,
    pub val_accuracy: f64,
}

/// Accuracy and confusion counts for one trial set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n_trials: usize,
    /// Fraction of trials whose fused prediction matches the label.
    pub accuracy: f64,
    /// `confusion[true_label][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Accuracy of each model's own scores, for diagnostics.
    pub per_model_accuracy: Vec<f64>,
}

/// Everything a finished run leaves behind, also written as
/// `manifest.json` next to the checkpoint and metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    /// Architecture actually used (explicit override or corpus-derived).
    pub extractor: ExtractorConfig,
    pub n_classes: usize,
    /// Subject partition, absent in `ce` mode.
    pub partition: Option<SubjectPartition>,
    pub split: SplitPlan,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test: Evaluation,
    /// Checkpoint file name, relative to the manifest's own directory so
    /// a run directory can be moved wholesale.
    pub checkpoint: String,
    /// The only field two identical runs are allowed to disagree on.
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn test_accuracy(&self) -> f64 {
        self.test.accuracy
    }
}

/// Trials of the listed subjects, in corpus order.
pub fn trials_for<'a>(corpus: &'a Corpus, subjects: &[u32]) -> Vec<&'a Trial> {
    corpus
        .trials
        .iter()
        .filter(|t| subjects.contains(&t.subject_id))
        .collect()
}

/// Packs trials into `[B, 1, C, T]` inputs, one-hot `[B, n_classes]`
/// targets, and the subject id per row.
fn batch_tensors(trials: &[&Trial], n_classes: usize) -> Result<(Tensor, Tensor, Vec<u32>)> {
    let b = trials.len();
    let (c, t) = (trials[0].channels, trials[0].samples);
    let mut x = Vec::with_capacity(b * c * t);
    let mut y = vec![0.0; b * n_classes];
    let mut subjects = Vec::with_capacity(b);
    for (i, trial) in trials.iter().enumerate() {
        if trial.channels != c || trial.samples != t {
            return Err(Error::Contract("trials in a batch must share geometry".into()));
        }
        let label = trial.label as usize;
        if label >= n_classes {
            return Err(Error::Contract(format!(
                "label {label} outside the {n_classes}-class corpus"
            )));
        }
        x.extend_from_slice(&trial.data);
        y[i * n_classes + label] = 1.0;
        subjects.push(trial.subject_id);
    }
    Ok((
        Tensor::new(vec![b, 1, c, t], x)?,
        Tensor::new(vec![b, n_classes], y)?,
        subjects,
    ))
}

/// Scores `trials` in eval mode and tallies fused and per-model accuracy.
/// Chunked to bound memory; chunking cannot change the results because
/// eval-mode forward passes are per-sample.
pub fn evaluate(
    net: &mut EnsembleNetwork,
    trials: &[&Trial],
    batch_size: usize,
) -> Result<Evaluation> {
    if trials.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty trial set".into()));
    }
    let n_classes = net.n_classes;
    let k = net.k();
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut fused_hits = 0usize;
    let mut model_hits = vec![0usize; k];
    for chunk in trials.chunks(batch_size.max(1)) {
        let (x, _, _) = batch_tensors(chunk, n_classes)?;
        let (per_model, fused) = net.eval_scores(&x)?;
        for (i, trial) in chunk.iter().enumerate() {
            let label = trial.label as usize;
            let row = &fused.data()[i * n_classes..(i + 1) * n_classes];
            let pred = argmax(row);
            confusion[label][pred] += 1;
            if pred == label {
                fused_hits += 1;
            }
            for (hits, scores) in model_hits.iter_mut().zip(&per_model) {
                let row = &scores.data()[i * n_classes..(i + 1) * n_classes];
                if argmax(row) == label {
                    *hits += 1;
                }
            }
        }
    }
    let n = trials.len();
    Ok(Evaluation {
        n_trials: n,
        accuracy: fused_hits as f64 / n as f64,
        confusion,
        per_model_accuracy: model_hits.iter().map(|&h| h as f64 / n as f64).collect(),
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs one full training job and writes `metrics.jsonl`,
/// `checkpoint.ckpt`, and `manifest.json` into `out_dir`.
///
/// Per epoch: seeded shuffle of the training trials, mini-batch SGD under
/// `loss_mode`, then fused-scores validation accuracy. The checkpoint is
/// the network state after the epoch with the best validation accuracy
/// (earliest such epoch on ties); the reported test numbers come from that
/// state, not the final one.
pub fn train(
    cfg: &TrainConfig,
    corpus: &Corpus,
    plan: &SplitPlan,
    out_dir: &Path,
) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    plan.validate(&corpus.subjects())?;

    let first = corpus
        .trials
        .first()
        .ok_or_else(|| Error::Config("corpus has no trials".into()))?;
    let n_classes = corpus.n_classes();
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "corpus has {n_classes} classes; training needs at least 2"
        )));
    }
    let extractor = cfg
        .extractor
        .clone()
        .unwrap_or_else(|| ExtractorConfig::new(first.channels, first.samples));
    if extractor.channels != first.channels || extractor.samples != first.samples {
        return Err(Error::Config(format!(
            "extractor expects {}x{} trials, corpus holds {}x{}",
            extractor.channels, extractor.samples, first.channels, first.samples
        )));
    }

    let train_trials = trials_for(corpus, &plan.train);
    let val_trials = trials_for(corpus, &plan.val);
    let test_trials = trials_for(corpus, &plan.test);
    for (name, set) in [
        ("train", &train_trials),
        ("val", &val_trials),
        ("test", &test_trials),
    ] {
        if set.is_empty() {
            return Err(Error::Config(format!("{name} split has no trials")));
        }
    }
    if train_trials.len() < 2 {
        return Err(Error::Config(
            "training split needs at least 2 trials for batch statistics".into(),
        ));
    }

    // `subj` optimizes the same composite graph as `total` with the
    // distillation weight pinned to zero, which makes the two modes'
    // metric streams bitwise comparable.
    let partition = match cfg.loss_mode {
        LossMode::Ce => None,
        LossMode::Subj | LossMode::Total => {
            let mut rng = seeded_stream(cfg.seed, PARTITION_STREAM);
            Some(SubjectPartition::make(&plan.train, cfg.k, &mut rng)?)
        }
    };
    let distill_cfg = DistillConfig {
        lambda_subj: cfg.k as f64,
        lambda_distill: match cfg.loss_mode {
            LossMode::Total => cfg.lambda_distill,
            LossMode::Ce | LossMode::Subj => 0.0,
        },
    };

    let mut net = EnsembleNetwork::new(extractor.clone(), cfg.k, n_classes, cfg.seed)?;
    let mut opt = SgdState::for_params(&net.trainable_mut());
    let mut shuffle_rng = seeded_stream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = seeded_stream(cfg.seed, DROPOUT_STREAM);

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);

    let mut metrics: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, EnsembleNetwork)> = None;

    for epoch in 0..cfg.epochs {
        let schedule = Schedule::new(cfg.epochs, epoch)?;
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_trials.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut batch_losses = Vec::new();
        let mut subj_losses = Vec::new();
        let mut distill_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            // A leftover single trial cannot provide batch statistics;
            // it rejoins the pool at the next epoch's shuffle.
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Trial> = chunk.iter().map(|&i| train_trials[i]).collect();
            let (x, y, subjects) = batch_tensors(&batch, n_classes)?;

            let mut g = Graph::new();
            let vars = net.register(&mut g);
            let xv = g.constant(x);
            let yv = g.constant(y);
            let out = net.forward(&mut g, &vars, xv, Mode::Train, &mut dropout_rng)?;

            let (objective, subj_val, distill_val) = match &partition {
                None => {
                    let mut total = g.cross_entropy(out.scores[0], yv)?;
                    for &s in &out.scores[1..] {
                        let ce = g.cross_entropy(s, yv)?;
                        total = g.add(total, ce)?;
                    }
                    let v = g.value(total).item()?;
                    (total, v, 0.0)
                }
                Some(p) => {
                    let loss = loss_total(
                        &mut g, &out.scores, yv, &subjects, p, &schedule, &distill_cfg,
                    )?;
                    let bd = loss.breakdown(&g);
                    (loss.total, bd.total_subj, bd.total_distill)
                }
            };
            batch_losses.push(g.value(objective).item()?);
            subj_losses.push(subj_val);
            distill_losses.push(distill_val);

            g.backward(objective)?;
            let grads: Vec<Tensor> = vars
                .flat()
                .iter()
                .map(|&v| g.grad(v).expect("trainable leaves always get gradients").clone())
                .collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut params = net.trainable_mut();
            sgd_step(&mut params, &grad_refs, &mut opt, lr, cfg.momentum, cfg.weight_decay)?;
        }
        if batch_losses.is_empty() {
            return Err(Error::Config(
                "no trainable batches; shrink batch_size or add trials".into(),
            ));
        }

        let val = evaluate(&mut net, &val_trials, cfg.batch_size)?;
        let record = EpochMetrics {
            epoch,
            lr,
            alpha: schedule.alpha(),
            train_loss: mean(&batch_losses),
            subj_loss: mean(&subj_losses),
            distill_loss: mean(&distill_losses),
            batch_losses,
            val_accuracy: val.accuracy,
        };
        writeln!(jsonl, "{}", serde_json::to_string(&record)?)?;
        if best.as_ref().map_or(true, |(_, acc, _)| val.accuracy > *acc) {
            best = Some((epoch, val.accuracy, net.clone()));
        }
        metrics.push(record);
    }
    jsonl.flush()?;

    let (best_epoch, best_val_accuracy, mut best_net) =
        best.expect("epochs >= 1 guarantees a best epoch");
    let test = evaluate(&mut best_net, &test_trials, cfg.batch_size)?;

    let checkpoint_name = "checkpoint.ckpt";
    crate::checkpoint::save_checkpoint(&out_dir.join(checkpoint_name), &best_net)?;

    let manifest = RunManifest {
        config: cfg.clone(),
        extractor,
        n_classes,
        partition,
        split: plan.clone(),
        metrics,
        best_epoch,
        best_val_accuracy,
        test,
        checkpoint: checkpoint_name.to_owned(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_checkpoint;
    use crate::splits::split_cv;
    use crate::synth::GeneratorSpec;

    fn tiny_corpus(seed: u64) -> Corpus {
        let spec = GeneratorSpec {
            n_subjects: 6,
            n_sessions: 1,
            trials_per_class: 4,
            channels: 3,
            fs: 32.0,
            trial_secs: 1.0,
            n_classes: 2,
            sigma_mix: 0.2,
            noise_level: 0.4,
            session_shift: 0.0,
            seed,
        };
        Corpus { trials: crate::synth::generate(&spec).unwrap(), fs: spec.fs }
    }

    fn tiny_config(mode: LossMode) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            k: 2,
            loss_mode: mode,
            extractor: Some(ExtractorConfig {
                channels: 3,
                samples: 32,
                temporal_filters: 2,
                depth_multiplier: 2,
                separable_filters: 4,
                temporal_kernel_len: 5,
                pool1: 2,
                pool2: 4,
                dropout_p: 0.25,
            }),
            ..TrainConfig::default()
        }
    }

    fn tiny_plan(corpus: &Corpus) -> SplitPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        split_cv(&corpus.subjects(), 3, 0, &mut rng).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let good = TrainConfig::default();
        assert!(good.validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..good.clone() },
            TrainConfig { batch_size: 1, ..good.clone() },
            TrainConfig { lr_phase1: 0.0, ..good.clone() },
            TrainConfig { lr_phase2: -0.1, ..good.clone() },
            TrainConfig { momentum: 1.0, ..good.clone() },
            TrainConfig { weight_decay: -0.01, ..good.clone() },
            TrainConfig { k: 0, ..good.clone() },
            TrainConfig { k: 1, loss_mode: LossMode::Total, ..good.clone() },
            TrainConfig { lambda_distill: -1.0, ..good.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} passed validation");
        }
        assert!(
            TrainConfig { k: 1, loss_mode: LossMode::Ce, ..good.clone() }
                .validate()
                .is_ok(),
            "single-model ce baseline must be allowed"
        );
    }

    #[test]
    fn lr_switches_at_the_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(59), 0.01);
        assert_eq!(cfg.lr_at(60), 0.002);
        assert_eq!(cfg.lr_at(119), 0.002);
        let short = TrainConfig { epochs: 40, ..cfg };
        assert_eq!(short.lr_at(19), 0.01);
        assert_eq!(short.lr_at(20), 0.002);
    }

    #[test]
    fn loss_mode_round_trips_strings() {
        for (s, m) in [
            ("ce", LossMode::Ce),
            ("subj", LossMode::Subj),
            ("total", LossMode::Total),
        ] {
            assert_eq!(s.parse::<LossMode>().unwrap(), m);
            assert_eq!(m.to_string(), s);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("{s:?}"));
        }
        assert!("cross".parse::<LossMode>().is_err());
    }

    #[test]
    fn config_json_defaults_fill_missing_keys() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 5, "loss_mode": "ce"}"#).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.loss_mode, LossMode::Ce);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.lambda_distill, 0.7);
        assert!(cfg.extractor.is_none());
    }

    #[test]
    fn evaluate_counts_match_by_hand() {
        // Perfect and constant predictors via direct confusion arithmetic.
        let corpus = tiny_corpus(3);
        let cfg = tiny_config(LossMode::Ce);
        let mut net = EnsembleNetwork::new(cfg.extractor.clone().unwrap(), 2, 2, 1).unwrap();
        let trials = trials_for(&corpus, &corpus.subjects());
        let eval = evaluate(&mut net, &trials, 16).unwrap();
        assert_eq!(eval.n_trials, trials.len());
        let total: usize = eval.confusion.iter().flatten().sum();
        assert_eq!(total, trials.len());
        let hits: usize = (0..2).map(|c| eval.confusion[c][c]).sum();
        assert_eq!(eval.accuracy, hits as f64 / trials.len() as f64);
        assert_eq!(eval.per_model_accuracy.len(), 2);
        for acc in eval.per_model_accuracy.iter().chain([&eval.accuracy]) {
            assert!((0.0..=1.0).contains(acc));
        }
        assert!(evaluate(&mut net, &[], 16).is_err());
    }

    #[test]
    fn evaluation_is_chunk_size_invariant() {
        let corpus = tiny_corpus(4);
        let cfg = tiny_config(LossMode::Ce);
        let mut net = EnsembleNetwork::new(cfg.extractor.clone().unwrap(), 2, 2, 5).unwrap();
        let trials = trials_for(&corpus, &corpus.subjects());
        let a = evaluate(&mut net, &trials, 1).unwrap();
        let b = evaluate(&mut net, &trials, 7).unwrap();
        let c = evaluate(&mut net, &trials, 1000).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn train_writes_all_artifacts_and_is_deterministic() {
        let corpus = tiny_corpus(5);
        let plan = tiny_plan(&corpus);
        let cfg = tiny_config(LossMode::Total);
        let dir = tempfile::tempdir().unwrap();
        let run_a = train(&cfg, &corpus, &plan, &dir.path().join("a")).unwrap();
        let run_b = train(&cfg, &corpus, &plan, &dir.path().join("b")).unwrap();

        assert_eq!(run_a.metrics, run_b.metrics);
        assert_eq!(run_a.test, run_b.test);
        assert_eq!(run_a.best_epoch, run_b.best_epoch);
        assert_eq!(run_a.partition, run_b.partition);
        let raw_a = std::fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
        let raw_b = std::fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
        assert_eq!(raw_a, raw_b, "metric streams must be byte-identical");

        assert_eq!(run_a.metrics.len(), cfg.epochs);
        for (e, m) in run_a.metrics.iter().enumerate() {
            assert_eq!(m.epoch, e);
            assert_eq!(m.lr, cfg.lr_at(e));
            assert!(m.train_loss.is_finite());
            assert!(!m.batch_losses.is_empty());
        }
        for file in ["metrics.jsonl", "checkpoint.ckpt", "manifest.json"] {
            assert!(dir.path().join("a").join(file).exists(), "{file} missing");
        }
        let manifest_text = std::fs::read_to_string(dir.path().join("a/manifest.json")).unwrap();
        let parsed: RunManifest = serde_json::from_str(&manifest_text).unwrap();
        assert_eq!(parsed.metrics, run_a.metrics);
        assert_eq!(parsed.config, cfg);
    }

    #[test]
    fn different_seeds_give_different_streams() {
        let corpus = tiny_corpus(5);
        let plan = tiny_plan(&corpus);
        let cfg = tiny_config(LossMode::Total);
        let other = TrainConfig { seed: cfg.seed + 1, ..cfg.clone() };
        let dir = tempfile::tempdir().unwrap();
        let run_a = train(&cfg, &corpus, &plan, &dir.path().join("a")).unwrap();
        let run_b = train(&other, &corpus, &plan, &dir.path().join("b")).unwrap();
        assert_ne!(run_a.metrics, run_b.metrics);
    }

    #[test]
    fn checkpoint_reproduces_recorded_validation_accuracy() {
        let corpus = tiny_corpus(6);
        let plan = tiny_plan(&corpus);
        let cfg = tiny_config(LossMode::Total);
        let dir = tempfile::tempdir().unwrap();
        let manifest = train(&cfg, &corpus, &plan, dir.path()).unwrap();
        let mut net = load_checkpoint(&dir.path().join(&manifest.checkpoint)).unwrap();
        let val = evaluate(&mut net, &trials_for(&corpus, &plan.val), cfg.batch_size).unwrap();
        assert_eq!(val.accuracy, manifest.best_val_accuracy);
        let test = evaluate(&mut net, &trials_for(&corpus, &plan.test), cfg.batch_size).unwrap();
        assert_eq!(test, manifest.test);
    }

    #[test]
    fn best_epoch_is_the_argmax_of_validation_accuracy() {
        let corpus = tiny_corpus(7);
        let plan = tiny_plan(&corpus);
        let cfg = TrainConfig { epochs: 5, ..tiny_config(LossMode::Subj) };
        let dir = tempfile::tempdir().unwrap();
        let manifest = train(&cfg, &corpus, &plan, dir.path()).unwrap();
        let accs: Vec<f64> = manifest.metrics.iter().map(|m| m.val_accuracy).collect();
        let best = accs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(manifest.best_val_accuracy, best);
        // Earliest epoch on ties.
        let first_best = accs.iter().position(|&a| a == best).unwrap();
        assert_eq!(manifest.best_epoch, first_best);
    }

    #[test]
    fn subj_mode_equals_total_with_zero_distill_weight() {
        let corpus = tiny_corpus(8);
        let plan = tiny_plan(&corpus);
        let subj_cfg = tiny_config(LossMode::Subj);
        let total_cfg = TrainConfig {
            loss_mode: LossMode::Total,
            lambda_distill: 0.0,
            ..subj_cfg.clone()
        };
        let dir = tempfile::tempdir().unwrap();
        let run_subj = train(&subj_cfg, &corpus, &plan, &dir.path().join("s")).unwrap();
        let run_total = train(&total_cfg, &corpus, &plan, &dir.path().join("t")).unwrap();
        assert_eq!(run_subj.metrics, run_total.metrics);
        assert_eq!(run_subj.test, run_total.test);
    }

    #[test]
    fn ce_mode_runs_without_a_partition() {
        let corpus = tiny_corpus(9);
        let plan = tiny_plan(&corpus);
        let cfg = TrainConfig { k: 1, ..tiny_config(LossMode::Ce) };
        let dir = tempfile::tempdir().unwrap();
        let manifest = train(&cfg, &corpus, &plan, dir.path()).unwrap();
        assert!(manifest.partition.is_none());
        for m in &manifest.metrics {
            assert_eq!(m.distill_loss, 0.0);
            assert_eq!(m.subj_loss, m.train_loss);
        }
    }

    #[test]
    fn empty_split_sets_are_config_errors() {
        let corpus = tiny_corpus(10);
        let mut plan = tiny_plan(&corpus);
        // Move all val subjects into train: still covers every subject, but
        // the val set is empty.
        plan.train.append(&mut plan.val);
        let cfg = tiny_config(LossMode::Total);
        let dir = tempfile::tempdir().unwrap();
        let err = train(&cfg, &corpus, &plan, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("val")), "{err}");
    }

    #[test]
    fn mismatched_extractor_geometry_is_rejected() {
        let corpus = tiny_corpus(11);
        let plan = tiny_plan(&corpus);
        let mut cfg = tiny_config(LossMode::Total);
        if let Some(ext) = cfg.extractor.as_mut() {
            ext.channels = 5;
        }
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            train(&cfg, &corpus, &plan, dir.path()),
            Err(Error::Config(_))
        ));
    }
}
