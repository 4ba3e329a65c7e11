//! Two-stage ensemble: K feature extractors with identical architecture and
//! independent parameters, feeding a single shared affine classifier.
//!
//! Each extractor is a compact EEGNet-style chain: temporal convolution,
//! depthwise spatial convolution over all channels, and a separable temporal
//! convolution, with batch norm / ELU / average pooling / dropout between
//! stages. Scores are fused by averaging at inference time.

use crate::error::{Error, Result};
use crate::graph::{BnState, Graph, Mode, Var};
use crate::tensor::{argmax, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters for one feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Input channels C.
    pub channels: usize,
    /// Input samples per trial T.
    pub samples: usize,
    /// Temporal filters F1 in the first convolution.
    pub temporal_filters: usize,
    /// Spatial filters per temporal filter D.
    pub depth_multiplier: usize,
    /// Output maps F2 of the separable convolution.
    pub separable_filters: usize,
    /// Kernel length of both temporal convolutions; must be odd.
    pub temporal_kernel_len: usize,
    /// Window (and stride) of the first average pooling.
    pub pool1: usize,
    /// Window (and stride) of the second average pooling.
    pub pool2: usize,
    /// Dropout probability in [0, 1).
    pub dropout_p: f64,
}

impl ExtractorConfig {
    /// Default sizing for a `channels x samples` input window, chosen so a
    /// single model at C=64, T=400 lands near 2.5K trainable parameters.
    pub fn new(channels: usize, samples: usize) -> Self {
        ExtractorConfig {
            channels,
            samples,
            temporal_filters: 8,
            depth_multiplier: 2,
            separable_filters: 16,
            temporal_kernel_len: 33,
            pool1: 4,
            pool2: 8,
            dropout_p: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("samples", self.samples),
            ("temporal_filters", self.temporal_filters),
            ("depth_multiplier", self.depth_multiplier),
            ("separable_filters", self.separable_filters),
            ("temporal_kernel_len", self.temporal_kernel_len),
            ("pool1", self.pool1),
            ("pool2", self.pool2),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.temporal_kernel_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "temporal_kernel_len {} must be odd",
                self.temporal_kernel_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        self.pooled_lengths()?;
        Ok(())
    }

    /// Time-axis lengths after each pooling stage. Pooling windows do not
    /// need to divide the input length; trailing samples that do not fill a
    /// window are dropped, and a stage shrinking to zero is a config error.
    pub fn pooled_lengths(&self) -> Result<(usize, usize)> {
        if self.samples < self.pool1 {
            return Err(Error::Config(format!(
                "pool1 stage: window {} exceeds {} input samples",
                self.pool1, self.samples
            )));
        }
        let t1 = (self.samples - self.pool1) / self.pool1 + 1;
        if t1 < self.pool2 {
            return Err(Error::Config(format!(
                "pool2 stage: window {} exceeds {} pooled samples",
                self.pool2, t1
            )));
        }
        let t2 = (t1 - self.pool2) / self.pool2 + 1;
        Ok((t1, t2))
    }

    /// Length of the flattened feature vector an extractor emits.
    pub fn feature_dim(&self) -> Result<usize> {
        let (_, t2) = self.pooled_lengths()?;
        Ok(self.separable_filters * t2)
    }

    fn spatial_maps(&self) -> usize {
        self.temporal_filters * self.depth_multiplier
    }
}

/// One feature extractor: parameter tensors plus batch-norm running moments.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub conv_temporal: Tensor,
    pub conv_spatial: Tensor,
    pub sep_depthwise: Tensor,
    pub sep_pointwise: Tensor,
    pub bn1_gamma: Tensor,
    pub bn1_beta: Tensor,
    pub bn2_gamma: Tensor,
    pub bn2_beta: Tensor,
    pub bn3_gamma: Tensor,
    pub bn3_beta: Tensor,
    pub bn1: BnState,
    pub bn2: BnState,
    pub bn3: BnState,
}

/// Uniform Glorot-style draw: scale from the fan of the layer.
fn glorot<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit).collect();
    Tensor::new(shape, data).expect("shape/data lengths agree by construction")
}

impl Extractor {
    /// Builds an extractor with freshly initialized parameters. Convolutions
    /// carry no bias (the batch norms absorb shifts), so the parameter count
    /// stays flat across inputs with the same channel count.
    pub fn build<R: Rng>(cfg: &ExtractorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let f1 = cfg.temporal_filters;
        let fd = cfg.spatial_maps();
        let f2 = cfg.separable_filters;
        let l = cfg.temporal_kernel_len;
        let c = cfg.channels;
        Ok(Extractor {
            conv_temporal: glorot(rng, vec![f1, 1, 1, l], l, f1 * l),
            conv_spatial: glorot(rng, vec![fd, 1, c, 1], c, cfg.depth_multiplier * c),
            sep_depthwise: glorot(rng, vec![fd, 1, 1, l], l, l),
            sep_pointwise: glorot(rng, vec![f2, fd, 1, 1], fd, f2),
            bn1_gamma: Tensor::full(vec![f1], 1.0),
            bn1_beta: Tensor::zeros(vec![f1]),
            bn2_gamma: Tensor::full(vec![fd], 1.0),
            bn2_beta: Tensor::zeros(vec![fd]),
            bn3_gamma: Tensor::full(vec![f2], 1.0),
            bn3_beta: Tensor::zeros(vec![f2]),
            bn1: BnState::new(f1),
            bn2: BnState::new(fd),
            bn3: BnState::new(f2),
        })
    }

    /// Trainable parameter count (running moments excluded).
    pub fn param_count(&self) -> usize {
        self.conv_temporal.numel()
            + self.conv_spatial.numel()
            + self.sep_depthwise.numel()
            + self.sep_pointwise.numel()
            + self.bn1_gamma.numel()
            + self.bn1_beta.numel()
            + self.bn2_gamma.numel()
            + self.bn2_beta.numel()
            + self.bn3_gamma.numel()
            + self.bn3_beta.numel()
    }
}

/// Parameter handles for one registered extractor.
#[derive(Debug, Clone, Copy)]
pub struct ExtractorVars {
    pub conv_temporal: Var,
    pub conv_spatial: Var,
    pub sep_depthwise: Var,
    pub sep_pointwise: Var,
    pub bn1_gamma: Var,
    pub bn1_beta: Var,
    pub bn2_gamma: Var,
    pub bn2_beta: Var,
    pub bn3_gamma: Var,
    pub bn3_beta: Var,
}

/// Handles for every trainable parameter registered on one graph. The
/// classifier pair appears exactly once and is referenced by all K branches.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub extractors: Vec<ExtractorVars>,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
}

impl NetVars {
    /// Parameter handles in the network's canonical order (matches
    /// [`EnsembleNetwork::named_tensors`] minus the running moments).
    pub fn flat(&self) -> Vec<Var> {
        let mut vars = Vec::new();
        for e in &self.extractors {
            vars.extend([
                e.conv_temporal,
                e.conv_spatial,
                e.sep_depthwise,
                e.sep_pointwise,
                e.bn1_gamma,
                e.bn1_beta,
                e.bn2_gamma,
                e.bn2_beta,
                e.bn3_gamma,
                e.bn3_beta,
            ]);
        }
        vars.push(self.classifier_weight);
        vars.push(self.classifier_bias);
        vars
    }
}

/// Per-branch features and scores from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// K flattened feature matrices `[B, feature_dim]`.
    pub features: Vec<Var>,
    /// K score matrices `[B, n_classes]`.
    pub scores: Vec<Var>,
}

/// K extractors plus the shared classifier.
#[derive(Debug, Clone)]
pub struct EnsembleNetwork {
    pub cfg: ExtractorConfig,
    pub extractors: Vec<Extractor>,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
    pub n_classes: usize,
}

impl EnsembleNetwork {
    /// Builds K independently initialized extractors and one classifier.
    /// Each extractor draws from its own seeded stream so the result does
    /// not depend on construction order.
    ///
    /// K = 1 is allowed here (single-model baselines); the curriculum and
    /// distillation losses themselves require K >= 2.
    pub fn new(cfg: ExtractorConfig, k: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("ensemble size K must be positive".into()));
        }
        if n_classes < 2 {
            return Err(Error::Config(format!("n_classes {n_classes} must be >= 2")));
        }
        cfg.validate()?;
        let feat = cfg.feature_dim()?;
        let mut extractors = Vec::with_capacity(k);
        for ki in 0..k {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ki as u64);
            extractors.push(Extractor::build(&cfg, &mut rng)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let classifier_weight = glorot(&mut rng, vec![feat, n_classes], feat, n_classes);
        let classifier_bias = Tensor::zeros(vec![n_classes]);
        Ok(EnsembleNetwork {
            cfg,
            extractors,
            classifier_weight,
            classifier_bias,
            n_classes,
        })
    }

    pub fn k(&self) -> usize {
        self.extractors.len()
    }

    /// Total trainable parameters: K * extractor + classifier.
    pub fn param_count(&self) -> usize {
        let per: usize = self.extractors.iter().map(Extractor::param_count).sum();
        per + self.classifier_weight.numel() + self.classifier_bias.numel()
    }

    /// Registers every trainable tensor on `graph` as a gradient-taking
    /// leaf. The classifier is registered once; all branches share it.
    pub fn register(&self, graph: &mut Graph) -> NetVars {
        let extractors = self
            .extractors
            .iter()
            .map(|e| ExtractorVars {
                conv_temporal: graph.param(e.conv_temporal.clone()),
                conv_spatial: graph.param(e.conv_spatial.clone()),
                sep_depthwise: graph.param(e.sep_depthwise.clone()),
                sep_pointwise: graph.param(e.sep_pointwise.clone()),
                bn1_gamma: graph.param(e.bn1_gamma.clone()),
                bn1_beta: graph.param(e.bn1_beta.clone()),
                bn2_gamma: graph.param(e.bn2_gamma.clone()),
                bn2_beta: graph.param(e.bn2_beta.clone()),
                bn3_gamma: graph.param(e.bn3_gamma.clone()),
                bn3_beta: graph.param(e.bn3_beta.clone()),
            })
            .collect();
        NetVars {
            extractors,
            classifier_weight: graph.param(self.classifier_weight.clone()),
            classifier_bias: graph.param(self.classifier_bias.clone()),
        }
    }

    /// Runs all K branches on a `[B, 1, C, T]` batch already placed on the
    /// graph. Train mode engages batch statistics and dropout; eval mode is
    /// deterministic and leaves the running moments untouched.
    pub fn forward<R: Rng>(
        &mut self,
        graph: &mut Graph,
        vars: &NetVars,
        batch: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let shape = graph.value(batch).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.cfg.channels || shape[3] != self.cfg.samples {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch {shape:?} does not match configured [B,1,{},{}]",
                    self.cfg.channels, self.cfg.samples
                ),
            ));
        }
        let b = shape[0];
        let feat = self.cfg.feature_dim()?;
        let p = self.cfg.dropout_p;
        let (pool1, pool2) = (self.cfg.pool1, self.cfg.pool2);
        let mut features = Vec::with_capacity(self.k());
        let mut scores = Vec::with_capacity(self.k());
        for (e, v) in self.extractors.iter_mut().zip(&vars.extractors) {
            let x = graph.conv_temporal(batch, v.conv_temporal)?;
            let x = graph.batch_norm(x, v.bn1_gamma, v.bn1_beta, &mut e.bn1, mode)?;
            let x = graph.conv_spatial_depthwise(x, v.conv_spatial)?;
            let x = graph.batch_norm(x, v.bn2_gamma, v.bn2_beta, &mut e.bn2, mode)?;
            let x = graph.elu(x);
            let x = graph.avg_pool_time(x, pool1, pool1)?;
            let x = graph.dropout(x, p, mode, rng)?;
            let x = graph.conv_temporal(x, v.sep_depthwise)?;
            let x = graph.conv_pointwise(x, v.sep_pointwise)?;
            let x = graph.batch_norm(x, v.bn3_gamma, v.bn3_beta, &mut e.bn3, mode)?;
            let x = graph.elu(x);
            let x = graph.avg_pool_time(x, pool2, pool2)?;
            let x = graph.dropout(x, p, mode, rng)?;
            let f = graph.reshape(x, vec![b, feat])?;
            let s = graph.linear(f, vars.classifier_weight, vars.classifier_bias)?;
            features.push(f);
            scores.push(s);
        }
        Ok(ForwardOutput { features, scores })
    }

    /// Trainable tensors with stable names, in [`NetVars::flat`] order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, e) in self.extractors.iter().enumerate() {
            out.push((format!("extractor{i}.conv_temporal"), &e.conv_temporal));
            out.push((format!("extractor{i}.conv_spatial"), &e.conv_spatial));
            out.push((format!("extractor{i}.sep_depthwise"), &e.sep_depthwise));
            out.push((format!("extractor{i}.sep_pointwise"), &e.sep_pointwise));
            out.push((format!("extractor{i}.bn1.gamma"), &e.bn1_gamma));
            out.push((format!("extractor{i}.bn1.beta"), &e.bn1_beta));
            out.push((format!("extractor{i}.bn2.gamma"), &e.bn2_gamma));
            out.push((format!("extractor{i}.bn2.beta"), &e.bn2_beta));
            out.push((format!("extractor{i}.bn3.gamma"), &e.bn3_gamma));
            out.push((format!("extractor{i}.bn3.beta"), &e.bn3_beta));
        }
        out.push(("classifier.weight".into(), &self.classifier_weight));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    /// Mutable view over trainable tensors in the same order as
    /// [`NetVars::flat`]; used by the optimizer.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for e in &mut self.extractors {
            out.push(&mut e.conv_temporal);
            out.push(&mut e.conv_spatial);
            out.push(&mut e.sep_depthwise);
            out.push(&mut e.sep_pointwise);
            out.push(&mut e.bn1_gamma);
            out.push(&mut e.bn1_beta);
            out.push(&mut e.bn2_gamma);
            out.push(&mut e.bn2_beta);
            out.push(&mut e.bn3_gamma);
            out.push(&mut e.bn3_beta);
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    /// Trainable tensors with stable names, mutable (checkpoint loading).
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, e) in self.extractors.iter_mut().enumerate() {
            out.push((format!("extractor{i}.conv_temporal"), &mut e.conv_temporal));
            out.push((format!("extractor{i}.conv_spatial"), &mut e.conv_spatial));
            out.push((format!("extractor{i}.sep_depthwise"), &mut e.sep_depthwise));
            out.push((format!("extractor{i}.sep_pointwise"), &mut e.sep_pointwise));
            out.push((format!("extractor{i}.bn1.gamma"), &mut e.bn1_gamma));
            out.push((format!("extractor{i}.bn1.beta"), &mut e.bn1_beta));
            out.push((format!("extractor{i}.bn2.gamma"), &mut e.bn2_gamma));
            out.push((format!("extractor{i}.bn2.beta"), &mut e.bn2_beta));
            out.push((format!("extractor{i}.bn3.gamma"), &mut e.bn3_gamma));
            out.push((format!("extractor{i}.bn3.beta"), &mut e.bn3_beta));
        }
        out.push(("classifier.weight".into(), &mut self.classifier_weight));
        out.push(("classifier.bias".into(), &mut self.classifier_bias));
        out
    }

    /// Batch-norm running moments, named for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, e) in self.extractors.iter().enumerate() {
            for (tag, st) in [("bn1", &e.bn1), ("bn2", &e.bn2), ("bn3", &e.bn3)] {
                out.push((format!("extractor{i}.{tag}.running_mean"), st.running_mean.clone()));
                out.push((format!("extractor{i}.{tag}.running_var"), st.running_var.clone()));
            }
        }
        out
    }

    /// Mutable view of the batch-norm running moments (checkpoint loading).
    pub fn state_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        for (i, e) in self.extractors.iter_mut().enumerate() {
            for (tag, st) in [
                ("bn1", &mut e.bn1),
                ("bn2", &mut e.bn2),
                ("bn3", &mut e.bn3),
            ] {
                out.push((format!("extractor{i}.{tag}.running_mean"), &mut st.running_mean));
                out.push((format!("extractor{i}.{tag}.running_var"), &mut st.running_var));
            }
        }
        out
    }

    /// Fused prediction: average the K score vectors and take the argmax per
    /// sample, ties resolved toward the lowest class index.
    pub fn predict(&mut self, batch: &Tensor) -> Result<Vec<usize>> {
        let fused = self.fused_scores(batch)?;
        Ok(fused
            .data()
            .chunks(self.n_classes)
            .map(argmax)
            .collect())
    }

    /// Eval-mode fused score matrix `[B, n_classes]` for a raw batch tensor.
    pub fn fused_scores(&mut self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.eval_scores(batch)?.1)
    }

    /// Eval-mode per-model score matrices plus the fused mean, each
    /// `[B, n_classes]`, for a raw `[B, 1, C, T]` batch tensor.
    pub fn eval_scores(&mut self, batch: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut graph = Graph::new();
        let vars = self.register(&mut graph);
        let b = graph.constant(batch.clone());
        // Dropout is identity in eval mode, so this rng is never consulted.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut graph, &vars, b, Mode::Eval, &mut rng)?;
        let fused = fuse_scores(&mut graph, &out.scores)?;
        let per_model = out
            .scores
            .iter()
            .map(|&s| graph.value(s).clone())
            .collect();
        Ok((per_model, graph.value(fused).clone()))
    }
}

/// Score fusion: elementwise mean of the K per-model score tensors.
pub fn fuse_scores(graph: &mut Graph, scores: &[Var]) -> Result<Var> {
    graph.mean_many(scores)
}
