//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value, the op tag, and whatever the backward pass needs. Handles are
//! [`Var`] indices into the tape, so topological order is construction order
//! and one reverse sweep visits each node exactly once.
//!
//! Only the operations the ensemble network and its losses require are
//! implemented; there is no broadcasting engine.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Forward behavior of stateful layers (dropout, batch norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running batch-norm moments, owned by the layer between graph lifetimes.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(features: usize) -> Self {
        BnState {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    ConvTemporal {
        input: usize,
        kernels: usize,
    },
    ConvSpatialDepthwise {
        input: usize,
        kernels: usize,
    },
    ConvPointwise {
        input: usize,
        kernels: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        train: bool,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Elu {
        input: usize,
    },
    AvgPoolTime {
        input: usize,
        window: usize,
        stride: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    Log {
        input: usize,
    },
    MeanMany {
        inputs: Vec<usize>,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    Mul {
        lhs: usize,
        rhs: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    SumAll {
        input: usize,
    },
    Reshape {
        input: usize,
    },
    CrossEntropyPerSample {
        scores: usize,
        targets: usize,
        probs: Vec<f64>,
        lse: Vec<f64>,
    },
    /// Barrier: forward identity, never traversed by backward.
    StopGradient,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    leaf: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, leaf: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf that does not take gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, true)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Inserts a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, populated by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("expected 4-d input, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

// ── Convolutions ───────────────────────────────────────────────────────────

impl Graph {
    /// Per-channel temporal convolution, zero-padded to preserve the time axis.
    ///
    /// `input` is `[B, G, C, T]`, `kernels` is `[F, 1, 1, L]` with odd `L` and
    /// `F` a multiple of `G`; output map `f` convolves input map `f / (F/G)`.
    /// With `G = 1` each of the `F` kernels fans out over the single input map.
    pub fn conv_temporal(&mut self, input: Var, kernels: Var) -> Result<Var> {
        let (b, g, c, t) = dims4(self.value(input).shape(), "conv_temporal")?;
        let kshape = self.value(kernels).shape().to_vec();
        if kshape.len() != 4 || kshape[1] != 1 || kshape[2] != 1 {
            return Err(Error::shape(
                "conv_temporal",
                format!("kernels must be [F,1,1,L], got {kshape:?}"),
            ));
        }
        let (f, l) = (kshape[0], kshape[3]);
        if l % 2 == 0 {
            return Err(Error::shape("conv_temporal", format!("kernel length {l} must be odd")));
        }
        if f % g != 0 {
            return Err(Error::shape(
                "conv_temporal",
                format!("{f} output maps not divisible by {g} input maps"),
            ));
        }
        let mult = f / g;
        let pad = l / 2;
        let x = self.value(input).data();
        let k = self.value(kernels).data();
        let mut out = vec![0.0; b * f * c * t];
        for bi in 0..b {
            for fi in 0..f {
                let gi = fi / mult;
                for ci in 0..c {
                    let in_row = &x[((bi * g + gi) * c + ci) * t..][..t];
                    let out_row = &mut out[((bi * f + fi) * c + ci) * t..][..t];
                    for j in 0..l {
                        let w = k[fi * l + j];
                        // out[t] += w * in[t + j - pad]
                        let (o_lo, i_lo, n) = shifted_range(t, j as isize - pad as isize);
                        axpy(w, &in_row[i_lo..i_lo + n], &mut out_row[o_lo..o_lo + n]);
                    }
                }
            }
        }
        let rg = self.any_requires(&[input, kernels]);
        Ok(self.push(
            Tensor::new(vec![b, f, c, t], out)?,
            Op::ConvTemporal { input: input.0, kernels: kernels.0 },
            rg,
            false,
        ))
    }

    /// Depthwise spatial filter collapsing the channel axis.
    ///
    /// `input` is `[B, F, C, T]`, `kernels` is `[F*D, 1, C, 1]`; output is
    /// `[B, F*D, 1, T]` where output map `o` takes a weighted sum over the
    /// channels of input map `o / D`.
    pub fn conv_spatial_depthwise(&mut self, input: Var, kernels: Var) -> Result<Var> {
        let (b, f, c, t) = dims4(self.value(input).shape(), "conv_spatial_depthwise")?;
        let kshape = self.value(kernels).shape().to_vec();
        if kshape.len() != 4 || kshape[1] != 1 || kshape[3] != 1 {
            return Err(Error::shape(
                "conv_spatial_depthwise",
                format!("kernels must be [F*D,1,C,1], got {kshape:?}"),
            ));
        }
        if kshape[2] != c {
            return Err(Error::shape(
                "conv_spatial_depthwise",
                format!("kernel spans {} channels, input has {}", kshape[2], c),
            ));
        }
        let fd = kshape[0];
        if !fd.is_multiple_of(f) {
            return Err(Error::shape(
                "conv_spatial_depthwise",
                format!("{fd} output maps not divisible by {f} input maps"),
            ));
        }
        let d = fd / f;
        let x = self.value(input).data();
        let k = self.value(kernels).data();
        let mut out = vec![0.0; b * fd * t];
        for bi in 0..b {
            for o in 0..fd {
                let fi = o / d;
                let out_row = &mut out[(bi * fd + o) * t..][..t];
                for ci in 0..c {
                    let w = k[o * c + ci];
                    let in_row = &x[((bi * f + fi) * c + ci) * t..][..t];
                    axpy(w, in_row, out_row);
                }
            }
        }
        let rg = self.any_requires(&[input, kernels]);
        Ok(self.push(
            Tensor::new(vec![b, fd, 1, t], out)?,
            Op::ConvSpatialDepthwise { input: input.0, kernels: kernels.0 },
            rg,
            false,
        ))
    }

    /// 1x1 convolution mixing feature maps (the pointwise half of a
    /// separable convolution). `input` is `[B, Ci, H, T]`, `kernels` is
    /// `[Co, Ci, 1, 1]`.
    pub fn conv_pointwise(&mut self, input: Var, kernels: Var) -> Result<Var> {
        let (b, ci, h, t) = dims4(self.value(input).shape(), "conv_pointwise")?;
        let kshape = self.value(kernels).shape().to_vec();
        if kshape.len() != 4 || kshape[2] != 1 || kshape[3] != 1 || kshape[1] != ci {
            return Err(Error::shape(
                "conv_pointwise",
                format!("kernels must be [Co,{ci},1,1], got {kshape:?}"),
            ));
        }
        let co = kshape[0];
        let x = self.value(input).data();
        let k = self.value(kernels).data();
        let ht = h * t;
        let mut out = vec![0.0; b * co * ht];
        for bi in 0..b {
            for o in 0..co {
                let out_row = &mut out[(bi * co + o) * ht..][..ht];
                for i in 0..ci {
                    let w = k[o * ci + i];
                    let in_row = &x[(bi * ci + i) * ht..][..ht];
                    axpy(w, in_row, out_row);
                }
            }
        }
        let rg = self.any_requires(&[input, kernels]);
        Ok(self.push(
            Tensor::new(vec![b, co, h, t], out)?,
            Op::ConvPointwise { input: input.0, kernels: kernels.0 },
            rg,
            false,
        ))
    }
}

/// Overlap of `out[t] += w * in[t + shift]` with both indices in `[0, len)`.
fn shifted_range(len: usize, shift: isize) -> (usize, usize, usize) {
    let o_lo = (-shift).max(0) as usize;
    let i_lo = shift.max(0) as usize;
    let n = len.saturating_sub(o_lo.max(i_lo));
    (o_lo, i_lo, n)
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

// ── Normalization, activations, pooling ────────────────────────────────────

impl Graph {
    /// Batch normalization over the feature axis (axis 1).
    ///
    /// Train mode normalizes by batch statistics and folds them into the
    /// running moments; eval mode normalizes by the running moments. Input is
    /// `[B, F, ...]`; `gamma` and `beta` are `[F]`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", format!("expected [B,F,...], got {shape:?}")));
        }
        let (b, f) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.value(gamma).shape() != [f] || self.value(beta).shape() != [f] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta must be [{f}] to match the feature axis"),
            ));
        }
        if state.running_mean.len() != f {
            return Err(Error::shape(
                "batch_norm",
                format!("state holds {} features, input has {f}", state.running_mean.len()),
            ));
        }
        let train = mode == Mode::Train;
        if train && b < 2 {
            return Err(Error::DegenerateBatch(
                "batch norm in train mode needs at least 2 samples".into(),
            ));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let m = (b * inner) as f64;

        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        if train {
            for bi in 0..b {
                for fi in 0..f {
                    let row = &x[(bi * f + fi) * inner..][..inner];
                    mean[fi] += row.iter().sum::<f64>();
                }
            }
            for mu in &mut mean {
                *mu /= m;
            }
            for bi in 0..b {
                for fi in 0..f {
                    let row = &x[(bi * f + fi) * inner..][..inner];
                    var[fi] += row.iter().map(|&v| (v - mean[fi]).powi(2)).sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= m;
            }
            let mom = state.momentum;
            for fi in 0..f {
                state.running_mean[fi] = (1.0 - mom) * state.running_mean[fi] + mom * mean[fi];
                let unbiased = var[fi] * m / (m - 1.0);
                state.running_var[fi] = (1.0 - mom) * state.running_var[fi] + mom * unbiased;
            }
        } else {
            mean.copy_from_slice(&state.running_mean);
            var.copy_from_slice(&state.running_var);
        }

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut x_hat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for fi in 0..f {
                let base = (bi * f + fi) * inner;
                for j in 0..inner {
                    let xh = (x[base + j] - mean[fi]) * inv_std[fi];
                    x_hat[base + j] = xh;
                    out[base + j] = g[fi] * xh + be[fi];
                }
            }
        }
        let rg = self.any_requires(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                train,
                x_hat,
                inv_std,
            },
            rg,
            false,
        ))
    }

    /// Exponential linear unit: `x` for `x >= 0`, `exp(x) - 1` below.
    pub fn elu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x >= 0.0 { x } else { x.exp() - 1.0 });
        let rg = self.nodes[input.0].requires_grad;
        self.push(value, Op::Elu { input: input.0 }, rg, false)
    }

    /// Average pooling along the last axis.
    pub fn avg_pool_time(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(Error::Parameter("pool window and stride must be positive".into()));
        }
        let shape = self.value(input).shape().to_vec();
        let t = *shape.last().expect("tensors have at least one axis");
        if t < window {
            return Err(Error::shape(
                "avg_pool_time",
                format!("window {window} exceeds time axis {t}"),
            ));
        }
        let t_out = (t - window) / stride + 1;
        let rows = self.value(input).numel() / t;
        let x = self.value(input).data();
        let mut out = vec![0.0; rows * t_out];
        let inv_w = 1.0 / window as f64;
        for r in 0..rows {
            let in_row = &x[r * t..][..t];
            for o in 0..t_out {
                let s: f64 = in_row[o * stride..o * stride + window].iter().sum();
                out[r * t_out + o] = s * inv_w;
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = t_out;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::AvgPoolTime { input: input.0, window, stride },
            rg,
            false,
        ))
    }

    /// Affine map `x @ w + b` with `x: [B, In]`, `w: [In, Out]`, `b: [Out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::shape(
                "linear",
                format!("incompatible shapes x{xs:?} w{ws:?} b{bs:?}"),
            ));
        }
        let (b, n_in, n_out) = (xs[0], ws[0], ws[1]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; b * n_out];
        for bi in 0..b {
            let x_row = &x[bi * n_in..][..n_in];
            let out_row = &mut out[bi * n_out..][..n_out];
            out_row.copy_from_slice(bv);
            for (i, &xi) in x_row.iter().enumerate() {
                axpy(xi, &w[i * n_out..][..n_out], out_row);
            }
        }
        let rg = self.any_requires(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![b, n_out], out)?,
            Op::Linear { input: input.0, weight: weight.0, bias: bias.0 },
            rg,
            false,
        ))
    }

    /// Inverted dropout: train mode zeroes with probability `p` and scales
    /// survivors by `1/(1-p)`; eval mode is the identity.
    pub fn dropout<R: Rng>(&mut self, input: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(input).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let x = self.value(input);
        let data: Vec<f64> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, Op::Dropout { input: input.0, mask }, rg, false))
    }
}

// ── Softmax, losses, reductions ─────────────────────────────────────────────

impl Graph {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(x[idx(j)]);
                }
                let mut denom = 0.0;
                for j in 0..n {
                    let e = (x[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    denom += e;
                }
                for j in 0..n {
                    out[idx(j)] /= denom;
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax { input: input.0, axis },
            rg,
            false,
        ))
    }

    /// Elementwise natural logarithm (IEEE semantics outside the domain).
    pub fn log(&mut self, input: Var) -> Var {
        let value = self.value(input).map(f64::ln);
        let rg = self.nodes[input.0].requires_grad;
        self.push(value, Op::Log { input: input.0 }, rg, false)
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_many(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("mean of an empty tensor list".into()));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        for &v in &inputs[1..] {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "mean_many",
                    format!("ragged inputs: {:?} vs {:?}", shape, self.value(v).shape()),
                ));
            }
        }
        let inv = 1.0 / inputs.len() as f64;
        let mut data = vec![0.0; self.value(inputs[0]).numel()];
        for &v in inputs {
            axpy(1.0, self.value(v).data(), &mut data);
        }
        for d in &mut data {
            *d *= inv;
        }
        let rg = self.any_requires(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::MeanMany { inputs: inputs.iter().map(|v| v.0).collect() },
            rg,
            false,
        ))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(lhs).shape(), self.value(rhs).shape()),
            ));
        }
        let data: Vec<f64> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a + b)
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let rg = self.any_requires(&[lhs, rhs]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { lhs: lhs.0, rhs: rhs.0 }, rg, false))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.value(lhs).shape(), self.value(rhs).shape()),
            ));
        }
        let data: Vec<f64> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a * b)
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let rg = self.any_requires(&[lhs, rhs]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { lhs: lhs.0, rhs: rhs.0 }, rg, false))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|x| factor * x);
        let rg = self.nodes[input.0].requires_grad;
        self.push(value, Op::Scale { input: input.0, factor }, rg, false)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().sum();
        let rg = self.nodes[input.0].requires_grad;
        self.push(Tensor::scalar(s), Op::SumAll { input: input.0 }, rg, false)
    }

    /// Mean of all elements (sum followed by a 1/n scale, in that order).
    pub fn mean_all(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        let s = self.sum_all(input);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).reshaped(shape)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, Op::Reshape { input: input.0 }, rg, false))
    }

    /// Per-sample cross-entropy `-sum_i y_i log(softmax(s)_i)` for soft or
    /// one-hot target rows. Returns `[B]`. Target rows must be non-negative
    /// and sum to 1 within 1e-6.
    pub fn cross_entropy_per_sample(&mut self, scores: Var, targets: Var) -> Result<Var> {
        let ss = self.value(scores).shape().to_vec();
        let ts = self.value(targets).shape().to_vec();
        if ss.len() != 2 || ts != ss {
            return Err(Error::shape(
                "cross_entropy",
                format!("scores {ss:?} and targets {ts:?} must be matching [B,N]"),
            ));
        }
        let (b, n) = (ss[0], ss[1]);
        let y = self.value(targets).data();
        for bi in 0..b {
            let row = &y[bi * n..][..n];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "target row {bi} sums to {sum}, expected 1"
                )));
            }
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::Validation(format!("target row {bi} has negative entries")));
            }
        }
        let s = self.value(scores).data();
        let mut probs = vec![0.0; b * n];
        let mut lse = vec![0.0; b];
        let mut out = vec![0.0; b];
        for bi in 0..b {
            let row = &s[bi * n..][..n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                probs[bi * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                probs[bi * n + j] /= denom;
            }
            lse[bi] = mx + denom.ln();
            let mut ce = 0.0;
            for j in 0..n {
                ce += y[bi * n + j] * (lse[bi] - row[j]);
            }
            out[bi] = ce;
        }
        let rg = self.any_requires(&[scores, targets]);
        Ok(self.push(
            Tensor::new(vec![b], out)?,
            Op::CrossEntropyPerSample { scores: scores.0, targets: targets.0, probs, lse },
            rg,
            false,
        ))
    }

    /// Batch-mean cross-entropy, the scalar form.
    pub fn cross_entropy(&mut self, scores: Var, targets: Var) -> Result<Var> {
        let per_sample = self.cross_entropy_per_sample(scores, targets)?;
        Ok(self.mean_all(per_sample))
    }

    /// Forward identity whose backward contributes nothing to its ancestors.
    pub fn stop_gradient(&mut self, input: Var) -> Var {
        let value = self.value(input).clone();
        self.push(value, Op::StopGradient, false, false)
    }
}

// ── Backward ────────────────────────────────────────────────────────────────

impl Graph {
    /// Reverse sweep from a scalar loss. Gradients accumulate additively into
    /// each node's `grad` across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut needed = vec![false; n];
        needed[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !needed[i] || !self.nodes[i].requires_grad {
                continue;
            }
            for inp in op_inputs(&self.nodes[i].op) {
                needed[inp] = true;
            }
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adjoint[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !needed[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let adj = match adjoint[i].take() {
                Some(a) => a,
                None => continue,
            };
            self.propagate(i, &adj, &mut adjoint);
            let node = &mut self.nodes[i];
            let grad = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            axpy(1.0, &adj, grad.data_mut());
        }

        // Leaves that never received an adjoint (e.g. cut off by
        // stop_gradient) still expose an explicit zero gradient.
        for node in &mut self.nodes {
            if node.leaf && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        adjoint: &mut [Option<Vec<f64>>],
        target: usize,
        contribution: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let buf = adjoint[target]
            .get_or_insert_with(|| vec![0.0; self.nodes[target].value.numel()]);
        contribution(buf);
    }

    fn propagate(&self, i: usize, adj: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        // Clones of the op metadata keep the borrow checker out of the match.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::ConvTemporal { input, kernels } => {
                let (b, g, c, t) = {
                    let s = self.nodes[input].value.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let ks = self.nodes[kernels].value.shape();
                let (f, l) = (ks[0], ks[3]);
                let mult = f / g;
                let pad = l / 2;
                let k = self.nodes[kernels].value.data();
                let x = self.nodes[input].value.data();
                self.accumulate(adjoint, input, |dx| {
                    for bi in 0..b {
                        for fi in 0..f {
                            let gi = fi / mult;
                            for ci in 0..c {
                                let dx_row = &mut dx[((bi * g + gi) * c + ci) * t..][..t];
                                let adj_row = &adj[((bi * f + fi) * c + ci) * t..][..t];
                                for j in 0..l {
                                    let w = k[fi * l + j];
                                    // dx[t] += w * dout[t - (j - pad)]
                                    let (o_lo, i_lo, n) =
                                        shifted_range(t, pad as isize - j as isize);
                                    axpy(w, &adj_row[i_lo..i_lo + n], &mut dx_row[o_lo..o_lo + n]);
                                }
                            }
                        }
                    }
                });
                self.accumulate(adjoint, kernels, |dk| {
                    for bi in 0..b {
                        for fi in 0..f {
                            let gi = fi / mult;
                            for ci in 0..c {
                                let x_row = &x[((bi * g + gi) * c + ci) * t..][..t];
                                let adj_row = &adj[((bi * f + fi) * c + ci) * t..][..t];
                                for j in 0..l {
                                    let (o_lo, i_lo, n) =
                                        shifted_range(t, j as isize - pad as isize);
                                    dk[fi * l + j] +=
                                        dot(&adj_row[o_lo..o_lo + n], &x_row[i_lo..i_lo + n]);
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvSpatialDepthwise { input, kernels } => {
                let (b, f, c, t) = {
                    let s = self.nodes[input].value.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let fd = self.nodes[kernels].value.shape()[0];
                let d = fd / f;
                let k = self.nodes[kernels].value.data();
                let x = self.nodes[input].value.data();
                self.accumulate(adjoint, input, |dx| {
                    for bi in 0..b {
                        for o in 0..fd {
                            let fi = o / d;
                            let adj_row = &adj[(bi * fd + o) * t..][..t];
                            for ci in 0..c {
                                let w = k[o * c + ci];
                                let dx_row = &mut dx[((bi * f + fi) * c + ci) * t..][..t];
                                axpy(w, adj_row, dx_row);
                            }
                        }
                    }
                });
                self.accumulate(adjoint, kernels, |dk| {
                    for bi in 0..b {
                        for o in 0..fd {
                            let fi = o / d;
                            let adj_row = &adj[(bi * fd + o) * t..][..t];
                            for ci in 0..c {
                                let x_row = &x[((bi * f + fi) * c + ci) * t..][..t];
                                dk[o * c + ci] += dot(adj_row, x_row);
                            }
                        }
                    }
                });
            }
            Op::ConvPointwise { input, kernels } => {
                let (b, ci_n, h, t) = {
                    let s = self.nodes[input].value.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let co = self.nodes[kernels].value.shape()[0];
                let ht = h * t;
                let k = self.nodes[kernels].value.data();
                let x = self.nodes[input].value.data();
                self.accumulate(adjoint, input, |dx| {
                    for bi in 0..b {
                        for o in 0..co {
                            let adj_row = &adj[(bi * co + o) * ht..][..ht];
                            for ii in 0..ci_n {
                                let w = k[o * ci_n + ii];
                                let dx_row = &mut dx[(bi * ci_n + ii) * ht..][..ht];
                                axpy(w, adj_row, dx_row);
                            }
                        }
                    }
                });
                self.accumulate(adjoint, kernels, |dk| {
                    for bi in 0..b {
                        for o in 0..co {
                            let adj_row = &adj[(bi * co + o) * ht..][..ht];
                            for ii in 0..ci_n {
                                let x_row = &x[(bi * ci_n + ii) * ht..][..ht];
                                dk[o * ci_n + ii] += dot(adj_row, x_row);
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { input, gamma, beta, train, ref x_hat, ref inv_std } => {
                let shape = self.nodes[input].value.shape();
                let (b, f) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (b * inner) as f64;
                let g = self.nodes[gamma].value.data();
                // Per-feature reductions of dy and dy*x_hat.
                let mut sum_dy = vec![0.0; f];
                let mut sum_dy_xh = vec![0.0; f];
                for bi in 0..b {
                    for fi in 0..f {
                        let base = (bi * f + fi) * inner;
                        for j in 0..inner {
                            sum_dy[fi] += adj[base + j];
                            sum_dy_xh[fi] += adj[base + j] * x_hat[base + j];
                        }
                    }
                }
                self.accumulate(adjoint, input, |dx| {
                    for bi in 0..b {
                        for fi in 0..f {
                            let base = (bi * f + fi) * inner;
                            let coef = g[fi] * inv_std[fi];
                            for j in 0..inner {
                                let dy = adj[base + j];
                                dx[base + j] += if train {
                                    coef / m
                                        * (m * dy
                                            - sum_dy[fi]
                                            - x_hat[base + j] * sum_dy_xh[fi])
                                } else {
                                    coef * dy
                                };
                            }
                        }
                    }
                });
                self.accumulate(adjoint, gamma, |dg| axpy(1.0, &sum_dy_xh, dg));
                self.accumulate(adjoint, beta, |db| axpy(1.0, &sum_dy, db));
            }
            Op::Elu { input } => {
                let y = self.nodes[i].value.data();
                let x = self.nodes[input].value.data();
                self.accumulate(adjoint, input, |dx| {
                    for j in 0..dx.len() {
                        let d = if x[j] >= 0.0 { 1.0 } else { y[j] + 1.0 };
                        dx[j] += adj[j] * d;
                    }
                });
            }
            Op::AvgPoolTime { input, window, stride } => {
                let t = *self.nodes[input].value.shape().last().unwrap();
                let t_out = (t - window) / stride + 1;
                let rows = self.nodes[input].value.numel() / t;
                let inv_w = 1.0 / window as f64;
                self.accumulate(adjoint, input, |dx| {
                    for r in 0..rows {
                        for o in 0..t_out {
                            let a = adj[r * t_out + o] * inv_w;
                            for j in 0..window {
                                dx[r * t + o * stride + j] += a;
                            }
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let (b, n_in) = {
                    let s = self.nodes[input].value.shape();
                    (s[0], s[1])
                };
                let n_out = self.nodes[weight].value.shape()[1];
                let x = self.nodes[input].value.data();
                let w = self.nodes[weight].value.data();
                self.accumulate(adjoint, input, |dx| {
                    for bi in 0..b {
                        let adj_row = &adj[bi * n_out..][..n_out];
                        let dx_row = &mut dx[bi * n_in..][..n_in];
                        for ii in 0..n_in {
                            dx_row[ii] += dot(adj_row, &w[ii * n_out..][..n_out]);
                        }
                    }
                });
                self.accumulate(adjoint, weight, |dw| {
                    for bi in 0..b {
                        let adj_row = &adj[bi * n_out..][..n_out];
                        for ii in 0..n_in {
                            axpy(x[bi * n_in + ii], adj_row, &mut dw[ii * n_out..][..n_out]);
                        }
                    }
                });
                self.accumulate(adjoint, bias, |db| {
                    for bi in 0..b {
                        axpy(1.0, &adj[bi * n_out..][..n_out], db);
                    }
                });
            }
            Op::Dropout { input, ref mask } => {
                self.accumulate(adjoint, input, |dx| {
                    for j in 0..dx.len() {
                        dx[j] += adj[j] * mask[j];
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = self.nodes[i].value.data();
                let shape = self.nodes[i].value.shape();
                let n = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                self.accumulate(adjoint, input, |dx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + ii;
                            let mut s = 0.0;
                            for j in 0..n {
                                s += adj[idx(j)] * y[idx(j)];
                            }
                            for j in 0..n {
                                dx[idx(j)] += y[idx(j)] * (adj[idx(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::Log { input } => {
                let x = self.nodes[input].value.data();
                self.accumulate(adjoint, input, |dx| {
                    for j in 0..dx.len() {
                        dx[j] += adj[j] / x[j];
                    }
                });
            }
            Op::MeanMany { ref inputs } => {
                let inv = 1.0 / inputs.len() as f64;
                for &inp in inputs {
                    self.accumulate(adjoint, inp, |dx| axpy(inv, adj, dx));
                }
            }
            Op::Add { lhs, rhs } => {
                self.accumulate(adjoint, lhs, |dx| axpy(1.0, adj, dx));
                self.accumulate(adjoint, rhs, |dx| axpy(1.0, adj, dx));
            }
            Op::Mul { lhs, rhs } => {
                let a = self.nodes[lhs].value.data();
                let b = self.nodes[rhs].value.data();
                self.accumulate(adjoint, lhs, |dx| {
                    for j in 0..dx.len() {
                        dx[j] += adj[j] * b[j];
                    }
                });
                self.accumulate(adjoint, rhs, |dx| {
                    for j in 0..dx.len() {
                        dx[j] += adj[j] * a[j];
                    }
                });
            }
            Op::Scale { input, factor } => {
                self.accumulate(adjoint, input, |dx| axpy(factor, adj, dx));
            }
            Op::SumAll { input } => {
                let a = adj[0];
                self.accumulate(adjoint, input, |dx| {
                    for d in dx.iter_mut() {
                        *d += a;
                    }
                });
            }
            Op::Reshape { input } => {
                self.accumulate(adjoint, input, |dx| axpy(1.0, adj, dx));
            }
            Op::CrossEntropyPerSample { scores, targets, ref probs, ref lse } => {
                let (b, n) = {
                    let s = self.nodes[scores].value.shape();
                    (s[0], s[1])
                };
                let y = self.nodes[targets].value.data();
                let s_val = self.nodes[scores].value.data();
                self.accumulate(adjoint, scores, |dx| {
                    for bi in 0..b {
                        let y_sum: f64 = y[bi * n..][..n].iter().sum();
                        for j in 0..n {
                            dx[bi * n + j] +=
                                adj[bi] * (probs[bi * n + j] * y_sum - y[bi * n + j]);
                        }
                    }
                });
                self.accumulate(adjoint, targets, |dy| {
                    for bi in 0..b {
                        for j in 0..n {
                            dy[bi * n + j] += adj[bi] * (lse[bi] - s_val[bi * n + j]);
                        }
                    }
                });
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::StopGradient => vec![],
        Op::ConvTemporal { input, kernels }
        | Op::ConvSpatialDepthwise { input, kernels }
        | Op::ConvPointwise { input, kernels } => vec![*input, *kernels],
        Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
        Op::Elu { input }
        | Op::AvgPoolTime { input, .. }
        | Op::Dropout { input, .. }
        | Op::Softmax { input, .. }
        | Op::Log { input }
        | Op::Scale { input, .. }
        | Op::SumAll { input }
        | Op::Reshape { input } => vec![*input],
        Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
        Op::MeanMany { inputs } => inputs.clone(),
        Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => vec![*lhs, *rhs],
        Op::CrossEntropyPerSample { scores, targets, .. } => vec![*scores, *targets],
    }
}
