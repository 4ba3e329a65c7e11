//! Finite-difference verification of the autodiff engine: every operation,
//! and the full composite training loss, checked against central
//! differences over randomized shapes and values.
//!
//! Reductions are weighted by random constants before differencing so that
//! index-mapping mistakes cannot hide inside permutation-invariant sums.
//! The distillation targets are frozen at the base parameters, matching the
//! loss's differentiation semantics (pseudolabels sit behind stop_gradient),
//! and a separate check asserts the live and frozen gradients coincide.

use crate::curriculum::{loss_subj, Schedule, SubjectPartition};
use crate::distill::{loss_distill_with_targets, loss_total, pseudolabel, DistillConfig};
use crate::error::{Error, Result};
use crate::graph::{BnState, Graph, Mode, Var};
use crate::model::{EnsembleNetwork, ExtractorConfig, ExtractorVars, NetVars};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
const H: f64 = 1e-5;

/// Relative-error bound every check must satisfy.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Worst relative error observed for one operation family.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of (parameter entry, seed) combinations differenced.
    pub checks: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + rng.random::<f64>() * (hi - lo)).collect()
}

/// Values bounded away from zero, for kinked activations.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = 0.2 + rng.random::<f64>();
            if rng.random::<f64>() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Differences every entry of every parameter of a scalar-valued build and
/// returns (max relative error, number of entries checked).
fn fd_case(
    shapes: &[Vec<usize>],
    values: &[Vec<f64>],
    build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<(f64, usize)> {
    let make_vars = |g: &mut Graph, vals: &[Vec<f64>], trainable: bool| -> Result<Vec<Var>> {
        shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| {
                let t = Tensor::new(s.clone(), v.clone())?;
                Ok(if trainable { g.param(t) } else { g.constant(t) })
            })
            .collect()
    };

    let mut g = Graph::new();
    let vars = make_vars(&mut g, values, true)?;
    let loss = build(&mut g, &vars)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::Contract(
            "gradient checks need a scalar objective".into(),
        ));
    }
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("registered parameter").data().to_vec())
        .collect();

    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = make_vars(&mut g, vals, false)?;
        let loss = build(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut max_rel: f64 = 0.0;
    let mut checks = 0;
    let mut work = values.to_vec();
    for pi in 0..values.len() {
        for i in 0..values[pi].len() {
            let orig = work[pi][i];
            work[pi][i] = orig + H;
            let plus = eval(&work)?;
            work[pi][i] = orig - H;
            let minus = eval(&work)?;
            work[pi][i] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            max_rel = max_rel.max(rel_err(grads[pi][i], numeric));
            checks += 1;
        }
    }
    Ok((max_rel, checks))
}

/// Wraps a raw op in a random-weighted sum so the objective is scalar and
/// sensitive to every output position.
fn weighted_case(
    rng: &mut ChaCha8Rng,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<(f64, usize)> {
    // Probe once for the output geometry.
    let mut g = Graph::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(&values)
        .map(|(s, v)| Ok(g.constant(Tensor::new(s.clone(), v.clone())?)))
        .collect::<Result<_>>()?;
    let out = op(&mut g, &vars)?;
    let out_shape = g.value(out).shape().to_vec();
    let w = Tensor::new(
        out_shape.clone(),
        uniform(rng, out_shape.iter().product(), -1.0, 1.0),
    )?;

    let build = move |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let out = op(g, vars)?;
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        Ok(g.sum_all(prod))
    };
    fd_case(&shapes, &values, &build)
}

// ── Per-op cases ────────────────────────────────────────────────────────────

fn check_conv_temporal(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let b = dim(rng, 1, 3);
    let groups = if rng.random::<f64>() < 0.5 { 1 } else { 2 };
    let f = groups * dim(rng, 1, 3);
    let c = dim(rng, 1, 3);
    let t = dim(rng, 3, 7);
    let l = [1, 3, 5][dim(rng, 0, 2)];
    let shapes = vec![vec![b, groups, c, t], vec![f, 1, 1, l]];
    let values = shapes.iter().map(|s| uniform(rng, s.iter().product(), -1.0, 1.0)).collect();
    weighted_case(rng, shapes, values, |g, v| g.conv_temporal(v[0], v[1]))
}

fn check_conv_spatial(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let b = dim(rng, 1, 3);
    let f = dim(rng, 1, 3);
    let d = dim(rng, 1, 2);
    let c = dim(rng, 1, 4);
    let t = dim(rng, 2, 6);
    let shapes = vec![vec![b, f, c, t], vec![f * d, 1, c, 1]];
    let values = shapes.iter().map(|s| uniform(rng, s.iter().product(), -1.0, 1.0)).collect();
    weighted_case(rng, shapes, values, |g, v| g.conv_spatial_depthwise(v[0], v[1]))
}

fn check_conv_pointwise(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let b = dim(rng, 1, 3);
    let ci = dim(rng, 1, 4);
    let co = dim(rng, 1, 3);
    let h = dim(rng, 1, 2);
    let t = dim(rng, 2, 6);
    let shapes = vec![vec![b, ci, h, t], vec![co, ci, 1, 1]];
    let values = shapes.iter().map(|s| uniform(rng, s.iter().product(), -1.0, 1.0)).collect();
    weighted_case(rng, shapes, values, |g, v| g.conv_pointwise(v[0], v[1]))
}

fn bn_shapes(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, usize) {
    let b = dim(rng, 2, 4);
    let f = dim(rng, 1, 3);
    let shape = if rng.random::<f64>() < 0.5 {
        vec![b, f]
    } else {
        vec![b, f, dim(rng, 2, 4)]
    };
    (vec![shape, vec![f], vec![f]], f)
}

fn check_batch_norm_train(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (shapes, f) = bn_shapes(rng);
    let values = vec![
        uniform(rng, shapes[0].iter().product(), -1.0, 1.0),
        uniform(rng, f, 0.5, 1.5),
        uniform(rng, f, -0.5, 0.5),
    ];
    weighted_case(rng, shapes, values, move |g, v| {
        let mut state = BnState::new(f);
        g.batch_norm(v[0], v[1], v[2], &mut state, Mode::Train)
    })
}

fn check_batch_norm_eval(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (shapes, f) = bn_shapes(rng);
    let values = vec![
        uniform(rng, shapes[0].iter().product(), -1.0, 1.0),
        uniform(rng, f, 0.5, 1.5),
        uniform(rng, f, -0.5, 0.5),
    ];
    let mut state = BnState::new(f);
    state.running_mean = uniform(rng, f, -0.5, 0.5);
    state.running_var = uniform(rng, f, 0.5, 1.5);
    weighted_case(rng, shapes, values, move |g, v| {
        let mut state = state.clone();
        g.batch_norm(v[0], v[1], v[2], &mut state, Mode::Eval)
    })
}

fn check_elu(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let shape = vec![dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 2), dim(rng, 2, 5)];
    let values = vec![off_zero(rng, shape.iter().product())];
    weighted_case(rng, vec![shape], values, |g, v| Ok(g.elu(v[0])))
}

fn check_avg_pool(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (window, stride) = [(2, 2), (3, 3), (3, 2), (2, 1)][dim(rng, 0, 3)];
    let t = window + dim(rng, 0, 4);
    let shape = vec![dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 2), t];
    let values = vec![uniform(rng, shape.iter().product(), -1.0, 1.0)];
    weighted_case(rng, vec![shape], values, move |g, v| {
        g.avg_pool_time(v[0], window, stride)
    })
}

fn check_linear(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let b = dim(rng, 1, 4);
    let n_in = dim(rng, 1, 4);
    let n_out = dim(rng, 1, 3);
    let shapes = vec![vec![b, n_in], vec![n_in, n_out], vec![n_out]];
    let values = shapes.iter().map(|s| uniform(rng, s.iter().product(), -1.0, 1.0)).collect();
    weighted_case(rng, shapes, values, |g, v| g.linear(v[0], v[1], v[2]))
}

fn check_dropout(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let shape = vec![dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 2), dim(rng, 2, 5)];
    let values = vec![uniform(rng, shape.iter().product(), -1.0, 1.0)];
    let mask_rng = ChaCha8Rng::seed_from_u64(rng.random());
    weighted_case(rng, vec![shape], values, move |g, v| {
        // The same mask must apply at every probe of the loss surface.
        let mut r = mask_rng.clone();
        g.dropout(v[0], 0.3, Mode::Train, &mut r)
    })
}

fn check_softmax(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let axis = usize::from(rng.random::<f64>() < 0.7);
    let shape = vec![dim(rng, 1, 3), dim(rng, 2, 4)];
    let values = vec![uniform(rng, shape.iter().product(), -2.0, 2.0)];
    weighted_case(rng, vec![shape], values, move |g, v| g.softmax(v[0], axis))
}

fn check_log_softmax(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let shape = vec![dim(rng, 1, 3), dim(rng, 2, 4)];
    let values = vec![uniform(rng, shape.iter().product(), -2.0, 2.0)];
    weighted_case(rng, vec![shape], values, |g, v| {
        let s = g.softmax(v[0], 1)?;
        Ok(g.log(s))
    })
}

fn check_log(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let shape = vec![dim(rng, 1, 3), dim(rng, 2, 4)];
    let values = vec![uniform(rng, shape.iter().product(), 0.3, 1.8)];
    weighted_case(rng, vec![shape], values, |g, v| Ok(g.log(v[0])))
}

fn check_mean_many(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let shape = vec![dim(rng, 1, 3), dim(rng, 2, 4)];
    let n: usize = shape.iter().product();
    let shapes = vec![shape.clone(), shape.clone(), shape];
    let values = (0..3).map(|_| uniform(rng, n, -1.0, 1.0)).collect();
    weighted_case(rng, shapes, values, |g, v| g.mean_many(v))
}

fn check_add_mul_scale(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let shape = vec![dim(rng, 1, 3), dim(rng, 2, 4)];
    let n: usize = shape.iter().product();
    let shapes = vec![shape.clone(), shape];
    let values = (0..2).map(|_| uniform(rng, n, -1.0, 1.0)).collect();
    let factor = -2.0 + rng.random::<f64>() * 4.0;
    weighted_case(rng, shapes, values, move |g, v| {
        let sum = g.add(v[0], v[1])?;
        let prod = g.mul(sum, v[0])?;
        Ok(g.scale(prod, factor))
    })
}

fn check_reductions(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let shape = vec![dim(rng, 1, 3), dim(rng, 2, 4)];
    let n: usize = shape.iter().product();
    let values = vec![uniform(rng, n, -1.0, 1.0)];
    // sum_all of x plus mean_all of x*x: both reductions in one scalar.
    let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let s = g.sum_all(v[0]);
        let sq = g.mul(v[0], v[0])?;
        let m = g.mean_all(sq);
        g.add(s, m)
    };
    fd_case(&[vec![shape[0], shape[1]]], &values, &build)
}

fn check_reshape(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (a, b, c) = (dim(rng, 1, 3), dim(rng, 2, 3), dim(rng, 2, 3));
    let shapes = vec![vec![a, b, c]];
    let values = vec![uniform(rng, a * b * c, -1.0, 1.0)];
    weighted_case(rng, shapes, values, move |g, v| {
        g.reshape(v[0], vec![c, a * b])
    })
}

/// Rows drawn positive and normalized to sum to one.
fn simplex_rows(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Vec<f64> {
    let mut rows = uniform(rng, b * n, 0.1, 1.0);
    for bi in 0..b {
        let row = &mut rows[bi * n..(bi + 1) * n];
        let s: f64 = row.iter().sum();
        for v in row {
            *v /= s;
        }
    }
    rows
}

fn check_cross_entropy_scores(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let b = dim(rng, 1, 4);
    let n = dim(rng, 2, 4);
    let shapes = vec![vec![b, n]];
    let values = vec![uniform(rng, b * n, -2.0, 2.0)];
    let targets = Tensor::new(vec![b, n], simplex_rows(rng, b, n))?;
    weighted_case(rng, shapes, values, move |g, v| {
        let t = g.constant(targets.clone());
        g.cross_entropy_per_sample(v[0], t)
    })
}

fn check_cross_entropy_targets(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    // Targets must stay on the simplex while being perturbed, so they are
    // parametrized through a softmax; this also exercises the target-side
    // partial of the loss.
    let b = dim(rng, 1, 4);
    let n = dim(rng, 2, 4);
    let shapes = vec![vec![b, n]];
    let values = vec![uniform(rng, b * n, -1.5, 1.5)];
    let scores = Tensor::new(vec![b, n], uniform(rng, b * n, -2.0, 2.0))?;
    weighted_case(rng, shapes, values, move |g, v| {
        let t = g.softmax(v[0], 1)?;
        let s = g.constant(scores.clone());
        g.cross_entropy_per_sample(s, t)
    })
}

fn check_cross_entropy_mean(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let b = dim(rng, 2, 4);
    let n = dim(rng, 2, 3);
    let shapes = vec![vec![b, n]];
    let values = vec![uniform(rng, b * n, -2.0, 2.0)];
    let targets = Tensor::new(vec![b, n], simplex_rows(rng, b, n))?;
    let build = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let t = g.constant(targets.clone());
        g.cross_entropy(v[0], t)
    };
    fd_case(&shapes, &values, &build)
}

/// stop_gradient: the analytic gradient of `x * sg(x*x)` must equal that of
/// `x * c` with `c` frozen at the base point, and the frozen form must pass
/// an ordinary difference check.
fn check_stop_gradient(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let shape = vec![dim(rng, 1, 3), dim(rng, 2, 4)];
    let n: usize = shape.iter().product();
    let base = uniform(rng, n, -1.0, 1.0);
    let frozen = Tensor::new(shape.clone(), base.iter().map(|v| v * v).collect())?;
    let w = Tensor::new(shape.clone(), uniform(rng, n, -1.0, 1.0))?;

    let frozen_build = {
        let (frozen, w) = (frozen.clone(), w.clone());
        move |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let c = g.constant(frozen.clone());
            let prod = g.mul(v[0], c)?;
            let wv = g.constant(w.clone());
            let weighted = g.mul(prod, wv)?;
            Ok(g.sum_all(weighted))
        }
    };
    let (fd_err, mut checks) = fd_case(&[shape.clone()], &[base.clone()], &frozen_build)?;

    // Live graph: same objective with the constant replaced by sg(x*x).
    let mut g = Graph::new();
    let x = g.param(Tensor::new(shape.clone(), base.clone())?);
    let sq = g.mul(x, x)?;
    let sg = g.stop_gradient(sq);
    let prod = g.mul(x, sg)?;
    let wv = g.constant(w.clone());
    let weighted = g.mul(prod, wv)?;
    let loss = g.sum_all(weighted);
    g.backward(loss)?;
    let live = g.grad(x).expect("param grad").data().to_vec();

    let mut gf = Graph::new();
    let xf = gf.param(Tensor::new(shape, base)?);
    let lf = frozen_build(&mut gf, &[xf])?;
    gf.backward(lf)?;
    let frozen_grad = gf.grad(xf).expect("param grad").data();

    let mut max_rel = fd_err;
    for (a, b) in live.iter().zip(frozen_grad) {
        max_rel = max_rel.max(rel_err(*a, *b));
        checks += 1;
    }
    Ok((max_rel, checks))
}

// ── The full composite loss ─────────────────────────────────────────────────

fn tiny_extractor() -> ExtractorConfig {
    ExtractorConfig {
        channels: 2,
        samples: 8,
        temporal_filters: 2,
        depth_multiplier: 1,
        separable_filters: 2,
        temporal_kernel_len: 3,
        pool1: 2,
        pool2: 2,
        dropout_p: 0.25,
    }
}

fn assemble_netvars(vars: &[Var], k: usize) -> NetVars {
    let extractors = (0..k)
        .map(|ki| {
            let b = ki * 10;
            ExtractorVars {
                conv_temporal: vars[b],
                conv_spatial: vars[b + 1],
                sep_depthwise: vars[b + 2],
                sep_pointwise: vars[b + 3],
                bn1_gamma: vars[b + 4],
                bn1_beta: vars[b + 5],
                bn2_gamma: vars[b + 6],
                bn2_beta: vars[b + 7],
                bn3_gamma: vars[b + 8],
                bn3_beta: vars[b + 9],
            }
        })
        .collect();
    NetVars {
        extractors,
        classifier_weight: vars[10 * k],
        classifier_bias: vars[10 * k + 1],
    }
}

struct CompositeCase {
    net: EnsembleNetwork,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    batch: Tensor,
    labels: Tensor,
    subjects: Vec<u32>,
    partition: SubjectPartition,
    schedule: Schedule,
    dcfg: DistillConfig,
    dropout_rng: ChaCha8Rng,
}

impl CompositeCase {
    fn draw(rng: &mut ChaCha8Rng) -> Result<Self> {
        let k = 2;
        let b = 4;
        let n_classes = 2;
        let cfg = tiny_extractor();
        let net = EnsembleNetwork::new(cfg.clone(), k, n_classes, rng.random())?;
        let (shapes, values) = net
            .named_tensors()
            .into_iter()
            .map(|(_, t)| (t.shape().to_vec(), t.data().to_vec()))
            .unzip();
        let batch = Tensor::new(
            vec![b, 1, cfg.channels, cfg.samples],
            uniform(rng, b * cfg.channels * cfg.samples, -1.0, 1.0),
        )?;
        let mut lab = vec![0.0; b * n_classes];
        for bi in 0..b {
            lab[bi * n_classes + rng.random_range(0..n_classes)] = 1.0;
        }
        let labels = Tensor::new(vec![b, n_classes], lab)?;
        let subjects: Vec<u32> = (0..b as u32).collect();
        let partition = SubjectPartition::make(&subjects, k, rng)?;
        let schedule = Schedule::new(40, 15)?;
        Ok(CompositeCase {
            net,
            shapes,
            values,
            batch,
            labels,
            subjects,
            partition,
            schedule,
            dcfg: DistillConfig::for_k(k),
            dropout_rng: ChaCha8Rng::seed_from_u64(rng.random()),
        })
    }

    /// Forward pass wired to externally supplied parameter vars.
    fn scores(&self, g: &mut Graph, vars: &[Var]) -> Result<Vec<Var>> {
        let netvars = assemble_netvars(vars, self.net.k());
        let mut net = self.net.clone();
        let xv = g.constant(self.batch.clone());
        let mut drop = self.dropout_rng.clone();
        let out = net.forward(g, &netvars, xv, Mode::Train, &mut drop)?;
        Ok(out.scores)
    }

    /// Pseudolabel tensors at the base parameters.
    fn frozen_targets(&self) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .shapes
            .iter()
            .zip(&self.values)
            .map(|(s, v)| Ok(g.constant(Tensor::new(s.clone(), v.clone())?)))
            .collect::<Result<_>>()?;
        let scores = self.scores(&mut g, &vars)?;
        (0..scores.len())
            .map(|k| {
                let pl = pseudolabel(&mut g, &scores, k)?;
                Ok(g.value(pl).clone())
            })
            .collect()
    }

    /// The composite objective with distillation targets held constant.
    fn frozen_build(
        &self,
        targets: &[Tensor],
    ) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> + '_ {
        let targets = targets.to_vec();
        move |g: &mut Graph, vars: &[Var]| -> Result<Var> {
            let scores = self.scores(g, vars)?;
            let yv = g.constant(self.labels.clone());
            let (_, ts) = loss_subj(
                g, &scores, yv, &self.subjects, &self.partition, &self.schedule,
            )?;
            let tvars: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
            let (_, td) = loss_distill_with_targets(
                g, &scores, &tvars, &self.subjects, &self.partition, &self.schedule,
            )?;
            let ws = g.scale(ts, self.dcfg.lambda_subj);
            let wd = g.scale(td, self.dcfg.lambda_distill);
            g.add(ws, wd)
        }
    }
}

/// Finite-difference check of the full loss with frozen targets.
fn check_composite_total(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let case = CompositeCase::draw(rng)?;
    let targets = case.frozen_targets()?;
    let build = case.frozen_build(&targets);
    fd_case(&case.shapes, &case.values, &build)
}

/// The live composite loss (pseudolabels rebuilt inside the graph, behind
/// stop_gradient) must produce exactly the gradients of the frozen form.
fn check_composite_live_vs_frozen(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let case = CompositeCase::draw(rng)?;
    let targets = case.frozen_targets()?;

    let grads_of = |build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = case
            .shapes
            .iter()
            .zip(&case.values)
            .map(|(s, v)| Ok(g.param(Tensor::new(s.clone(), v.clone())?)))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &vars)?;
        g.backward(loss)?;
        vars.iter()
            .map(|&v| Ok(g.grad(v).expect("param grad").data().to_vec()))
            .collect()
    };

    let frozen_build = case.frozen_build(&targets);
    let frozen = grads_of(&frozen_build)?;
    let live_build = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let scores = case.scores(g, vars)?;
        let yv = g.constant(case.labels.clone());
        let loss = loss_total(
            g,
            &scores,
            yv,
            &case.subjects,
            &case.partition,
            &case.schedule,
            &case.dcfg,
        )?;
        Ok(loss.total)
    };
    let live = grads_of(&live_build)?;

    let mut max_rel: f64 = 0.0;
    let mut checks = 0;
    for (fg, lg) in frozen.iter().zip(&live) {
        for (f, l) in fg.iter().zip(lg) {
            max_rel = max_rel.max(rel_err(*f, *l));
            checks += 1;
        }
    }
    Ok((max_rel, checks))
}

// ── Runner ──────────────────────────────────────────────────────────────────

type OpCheck = fn(&mut ChaCha8Rng) -> Result<(f64, usize)>;

const OPS: &[(&str, OpCheck)] = &[
    ("conv_temporal", check_conv_temporal),
    ("conv_spatial_depthwise", check_conv_spatial),
    ("conv_pointwise", check_conv_pointwise),
    ("batch_norm_train", check_batch_norm_train),
    ("batch_norm_eval", check_batch_norm_eval),
    ("elu", check_elu),
    ("avg_pool_time", check_avg_pool),
    ("linear", check_linear),
    ("dropout", check_dropout),
    ("softmax", check_softmax),
    ("log", check_log),
    ("log_softmax", check_log_softmax),
    ("mean_many", check_mean_many),
    ("add_mul_scale", check_add_mul_scale),
    ("sum_mean_reductions", check_reductions),
    ("reshape", check_reshape),
    ("cross_entropy_scores", check_cross_entropy_scores),
    ("cross_entropy_targets", check_cross_entropy_targets),
    ("cross_entropy_mean", check_cross_entropy_mean),
    ("stop_gradient", check_stop_gradient),
    ("composite_total", check_composite_total),
    ("composite_live_vs_frozen", check_composite_live_vs_frozen),
];

/// Runs every operation family over `seeds_per_op` random seeds and
/// reports the worst relative error seen per family.
pub fn run_gradcheck(seeds_per_op: usize) -> Result<Vec<OpReport>> {
    if seeds_per_op == 0 {
        return Err(Error::Parameter("seeds_per_op must be positive".into()));
    }
    OPS.iter()
        .enumerate()
        .map(|(op_idx, (name, check))| {
            let mut max_rel_err: f64 = 0.0;
            let mut checks = 0;
            for seed in 0..seeds_per_op {
                let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
                rng.set_stream(op_idx as u64);
                let (e, c) = check(&mut rng)?;
                max_rel_err = max_rel_err.max(e);
                checks += c;
            }
            Ok(OpReport { name: (*name).into(), max_rel_err, checks })
        })
        .collect()
}
