//! Siamese encoder, pooling, expander, and the composite training objective.
//!
//! Parameters live in a [`ParamStore`] keyed by name. A forward pass binds the
//! store onto a fresh [`Graph`]; after `backward` the gradients are read back
//! by the same names.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::cvsim::{make_marginals, AttentionLayout, CvSimError, CvSimParams, CvSimWeights};
use crate::ot::{cost_from_discrepancy, discrepancy, ot_loss, sinkhorn_graph, FeatureMap, OtError, SinkhornMode, SinkhornOptions};
use crate::tensor::{BatchStats, Graph, Tensor, TensorError, Var};
use crate::vicreg::{covariance_term, variance_term};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("ndtensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("otcore: {0}")]
    Ot(#[from] OtError),
    #[error("cvsim: {0}")]
    CvSim(#[from] CvSimError),
    #[error("model: {0}")]
    Config(String),
}

impl ModelError {
    /// True for failures caused by the numbers rather than by the inputs' structure.
    pub fn is_numerical(&self) -> bool {
        match self {
            ModelError::Tensor(e) | ModelError::Ot(OtError::Tensor(e)) | ModelError::CvSim(CvSimError::Tensor(e)) => {
                matches!(e, TensorError::NonFinite { .. } | TensorError::Domain { .. })
            }
            ModelError::Ot(OtError::NotConverged { .. } | OtError::DegenerateFeature { .. } | OtError::DiscrepancyRange { .. }) => true,
            _ => false,
        }
    }
}

/// One convolution block: `out_channels` filters of size `kernel`, applied with `stride`
/// and padding `kernel / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl fmt::Display for ConvBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.out_channels, self.kernel, self.stride)
    }
}

impl FromStr for ConvBlock {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [o, k, st] = parts.as_slice() else {
            return Err(format!("conv block `{s}` must be out:kernel:stride"));
        };
        let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("conv block `{s}`: {e}"));
        let block = ConvBlock { out_channels: num(o)?, kernel: num(k)?, stride: num(st)? };
        if block.out_channels == 0 || block.kernel == 0 || block.stride == 0 {
            return Err(format!("conv block `{s}` has a zero field"));
        }
        Ok(block)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub blocks: Vec<ConvBlock>,
    /// Square input side length.
    pub image_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let b = |o, s| ConvBlock { out_channels: o, kernel: 3, stride: s };
        Self { blocks: vec![b(8, 2), b(16, 2), b(32, 2), b(32, 1)], image_size: 32 }
    }
}

impl EncoderConfig {
    /// Output `(channels, height, width)`; checks the geometry contract.
    pub fn geometry(&self) -> Result<(usize, usize, usize), ModelError> {
        if self.blocks.is_empty() {
            return Err(ModelError::Config("encoder needs at least one block".into()));
        }
        let mut side = self.image_size;
        for b in &self.blocks {
            let padded = side + 2 * (b.kernel / 2);
            if b.kernel > padded {
                return Err(ModelError::Config(format!("kernel {} exceeds padded size {padded}", b.kernel)));
            }
            side = (padded - b.kernel) / b.stride + 1;
        }
        let d = self.blocks.last().expect("nonempty").out_channels;
        if side < 2 {
            return Err(ModelError::Config(format!("final spatial size {side}x{side} is below 2x2")));
        }
        if d < 8 {
            return Err(ModelError::Config(format!("final channel count {d} is below 8")));
        }
        Ok((d, side, side))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.6, beta: 25.0, eta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub expander: Vec<usize>,
    pub layout: AttentionLayout,
    pub temperature: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Target standard deviation of the variance hinge.
    pub gamma: f64,
    pub var_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            expander: vec![256, 256, 256],
            layout: AttentionLayout { tokens: 8, heads: 2 },
            temperature: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            gamma: 1.0,
            var_eps: 1e-4,
        }
    }
}

impl ModelConfig {
    /// Two conv blocks on 8×8 input, `d = 8`, four attention tokens. Small
    /// enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                blocks: vec![
                    ConvBlock { out_channels: 4, kernel: 3, stride: 2 },
                    ConvBlock { out_channels: 8, kernel: 3, stride: 1 },
                ],
                image_size: 8,
            },
            expander: vec![16, 16],
            layout: AttentionLayout { tokens: 4, heads: 1 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (d, _, _) = self.encoder.geometry()?;
        if self.expander.is_empty() || self.expander.contains(&0) {
            return Err(ModelError::Config("expander needs at least one nonzero width".into()));
        }
        self.layout.validate(d)?;
        if !(self.temperature > 0.0) {
            return Err(ModelError::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.encoder.blocks.last().map_or(0, |b| b.out_channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub mode: SinkhornMode,
    pub tol: f64,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, iterations: 50, mode: SinkhornMode::Unrolled, tol: 1e-6 }
    }
}

/// Role of a named parameter, used by optimizers to decide on weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

impl ParamKind {
    pub fn of(name: &str) -> Self {
        if name.ends_with(".bias") {
            ParamKind::Bias
        } else if name.ends_with(".gamma") || name.ends_with(".beta") {
            ParamKind::Norm
        } else {
            ParamKind::Weight
        }
    }
}

/// Named trainable tensors plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Fresh parameters: Kaiming-uniform weights, zero biases, unit BN scales,
    /// orthogonal attention projections. Each tensor draws from its own stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut stream = 0u64;
        let mut rng = || {
            stream += 1;
            Xoshiro256PlusPlus::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        };
        let mut cin = 1;
        for (i, b) in cfg.encoder.blocks.iter().enumerate() {
            let fan_in = cin * b.kernel * b.kernel;
            store.params.insert(format!("enc{i}.weight"), kaiming(&[b.out_channels, cin, b.kernel, b.kernel], fan_in, &mut rng()));
            store.params.insert(format!("enc{i}.bias"), Tensor::zeros(&[b.out_channels]));
            cin = b.out_channels;
        }
        let d = cin;
        let mut width = d;
        let last = cfg.expander.len() - 1;
        for (i, &out) in cfg.expander.iter().enumerate() {
            store.params.insert(format!("exp{i}.weight"), kaiming(&[out, width], width, &mut rng()));
            store.params.insert(format!("exp{i}.bias"), Tensor::zeros(&[out]));
            if i < last {
                store.params.insert(format!("exp{i}.bn.gamma"), Tensor::ones(&[out]));
                store.params.insert(format!("exp{i}.bn.beta"), Tensor::zeros(&[out]));
                store.buffers.insert(format!("exp{i}.bn.running_mean"), Tensor::zeros(&[out]));
                store.buffers.insert(format!("exp{i}.bn.running_var"), Tensor::ones(&[out]));
            }
            width = out;
        }
        for branch in ["cvsim_s", "cvsim_t"] {
            let p = CvSimParams::init(d, &mut rng());
            store.params.insert(format!("{branch}.w_q"), p.w_q);
            store.params.insert(format!("{branch}.w_k"), p.w_k);
            store.params.insert(format!("{branch}.w_v"), p.w_v);
        }
        Ok(store)
    }

    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), graph.param(v.clone()))).collect() }
    }

    /// Same as [`ParamStore::bind`] but every parameter is a constant (no gradients).
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), graph.constant(v.clone()))).collect() }
    }

    /// Gradients of every parameter after `backward`, zero where no path existed.
    pub fn grads(&self, bound: &Bound<'_>) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| {
                let g = bound.vars.get(k).and_then(|var| var.grad()).unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect()
    }

    /// Exponential moving update of the BN running statistics.
    pub fn update_running(&mut self, stats: &[(String, BatchStats)], momentum: f64) {
        for (prefix, s) in stats {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{prefix}.{suffix}")) {
                    for (b, v) in buf.data_mut().iter_mut().zip(values.iter()) {
                        *b = (1.0 - momentum) * *b + momentum * v;
                    }
                }
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Parameters of a [`ParamStore`] bound to one graph.
pub struct Bound<'g> {
    pub vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::Config(format!("missing parameter `{name}`")))
    }

    fn cvsim(&self, branch: &str) -> Result<CvSimWeights<'g>, ModelError> {
        Ok(CvSimWeights {
            q: self.get(&format!("{branch}.w_q"))?,
            k: self.get(&format!("{branch}.w_k"))?,
            v: self.get(&format!("{branch}.w_v"))?,
        })
    }
}

/// Batch normalization behaviour of the expander.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Dense maps for a batch `N×1×h×w` (or one image `1×h×w`), flattened to `N×d×hw` (`d×hw`).
pub fn encode_batch<'g>(bound: &Bound<'g>, cfg: &ModelConfig, images: Var<'g>) -> Result<Var<'g>, ModelError> {
    let shape = images.shape();
    let s = cfg.encoder.image_size;
    let single = match shape.as_slice() {
        [1, h, w] if *h == s && *w == s => true,
        [_, 1, h, w] if *h == s && *w == s => false,
        _ => return Err(ModelError::Config(format!("expected images of 1x{s}x{s}, got {shape:?}"))),
    };
    let mut x = images;
    let last = cfg.encoder.blocks.len() - 1;
    for (i, b) in cfg.encoder.blocks.iter().enumerate() {
        let w = bound.get(&format!("enc{i}.weight"))?;
        let bias = bound.get(&format!("enc{i}.bias"))?;
        x = x.conv2d(w, b.stride, b.kernel / 2)?;
        let bshape: Vec<usize> = if single { vec![b.out_channels, 1, 1] } else { vec![1, b.out_channels, 1, 1] };
        x = x.add(bias.reshape(&bshape)?)?;
        if i < last {
            x = x.relu()?;
        }
    }
    let shape = x.shape();
    let r = shape.len();
    let mut flat = shape[..r - 2].to_vec();
    flat.push(shape[r - 2] * shape[r - 1]);
    Ok(x.reshape(&flat)?)
}

/// Global average pooling of `N×d×hw` maps to `N×d` (or `d×hw` to `d`).
pub fn pool<'g>(z: Var<'g>) -> Result<Var<'g>, ModelError> {
    let shape = z.shape();
    let r = shape.len();
    Ok(z.mean_axis(r - 1)?.reshape(&shape[..r - 1])?)
}

/// Expander MLP on pooled features `n×d`; returns the embeddings and, in training
/// mode, the BN batch statistics keyed by layer prefix.
pub fn expand<'g>(
    bound: &Bound<'g>,
    cfg: &ModelConfig,
    g: Var<'g>,
    mode: BnMode,
    store: &ParamStore,
) -> Result<(Var<'g>, Vec<(String, BatchStats)>), ModelError> {
    let graph = g.graph();
    let mut x = g;
    let mut stats = Vec::new();
    let last = cfg.expander.len() - 1;
    for i in 0..cfg.expander.len() {
        let w = bound.get(&format!("exp{i}.weight"))?;
        let b = bound.get(&format!("exp{i}.bias"))?;
        x = x.matmul(w.transpose()?)?.add(b.reshape(&[1, cfg.expander[i]])?)?;
        if i == last {
            break;
        }
        let prefix = format!("exp{i}.bn");
        let gamma = bound.get(&format!("{prefix}.gamma"))?;
        let beta = bound.get(&format!("{prefix}.beta"))?;
        x = match mode {
            BnMode::Train => {
                let (y, s) = x.batchnorm1d(gamma, beta, cfg.bn_eps)?;
                stats.push((prefix, s));
                y
            }
            BnMode::Eval => {
                let buf = |name: &str| {
                    store
                        .buffers
                        .get(&format!("{prefix}.{name}"))
                        .cloned()
                        .ok_or_else(|| ModelError::Config(format!("missing buffer `{prefix}.{name}`")))
                };
                let width = cfg.expander[i];
                let mean = graph.constant(buf("running_mean")?.reshape(&[1, width])?);
                let inv_std = graph.constant(buf("running_var")?.map(|v| 1.0 / (v + cfg.bn_eps).sqrt()).reshape(&[1, width])?);
                x.sub(mean)?.mul(inv_std)?.mul(gamma.reshape(&[1, width])?)?.add(beta.reshape(&[1, width])?)?
            }
        };
        x = x.relu()?;
    }
    Ok((x, stats))
}

/// Per-step loss values.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ot: f64,
    pub l_var: f64,
    pub l_cov: f64,
    pub total: f64,
    pub sinkhorn_iterations: usize,
    pub marginal_error: f64,
    /// Mean per-dimension standard deviation of the expander outputs (both branches).
    pub feat_std: f64,
}

pub struct ForwardOutput<'g> {
    pub total: Var<'g>,
    pub breakdown: LossBreakdown,
    /// BN batch statistics of both branches, source branch first.
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// Full objective for two aligned batches of views, each `n×1×h×w`.
#[allow(clippy::too_many_arguments)]
pub fn forward_loss<'g>(
    graph: &'g Graph,
    bound: &Bound<'g>,
    store: &ParamStore,
    cfg: &ModelConfig,
    ot: &OtConfig,
    weights: &LossWeights,
    views_s: &Tensor,
    views_t: &Tensor,
) -> Result<ForwardOutput<'g>, ModelError> {
    let n = views_s.shape().first().copied().unwrap_or(0);
    if views_s.shape() != views_t.shape() || views_s.rank() != 4 {
        return Err(ModelError::Config(format!("view batches differ: {:?} vs {:?}", views_s.shape(), views_t.shape())));
    }
    if n < 2 {
        return Err(TensorError::BatchSize { op: "forward_loss", rows: n }.into());
    }
    let both = Tensor::stack(&[views_s.clone(), views_t.clone()])?;
    let mut joined = both.shape()[1..].to_vec();
    joined[0] = 2 * n;
    let x = graph.constant(both.reshape(&joined)?);
    let z = encode_batch(bound, cfg, x)?;
    let (z_s, z_t) = (z.slice(0, 0, n)?, z.slice(0, n, n)?);

    let cost = cost_from_discrepancy(discrepancy(z_s, z_t)?)?;
    let (g_s, g_t) = (pool(z_s)?, pool(z_t)?);
    let pair = make_marginals(g_s, g_t, &bound.cvsim("cvsim_s")?, &bound.cvsim("cvsim_t")?, cfg.layout, cfg.temperature)?;
    let opts = SinkhornOptions { max_iters: ot.iterations, tol: ot.tol, mode: ot.mode };
    let plan = sinkhorn_graph(cost, pair.mu, pair.nu, ot.epsilon, &opts)?;
    let l_ot = ot_loss(plan.plan, cost)?;

    let (q_s, mut bn_stats) = expand(bound, cfg, g_s, BnMode::Train, store)?;
    let (q_t, stats_t) = expand(bound, cfg, g_t, BnMode::Train, store)?;
    bn_stats.extend(stats_t);
    let l_var = variance_term(q_s, cfg.gamma, cfg.var_eps)?.add(variance_term(q_t, cfg.gamma, cfg.var_eps)?)?;
    let l_cov = covariance_term(q_s)?.add(covariance_term(q_t)?)?;
    let total = l_ot.scale(weights.alpha)?.add(l_var.scale(weights.beta)?)?.add(l_cov.scale(weights.eta)?)?;

    let feat_std = (mean_column_std(&q_s.value()) + mean_column_std(&q_t.value())) / 2.0;
    let breakdown = LossBreakdown {
        l_ot: l_ot.item(),
        l_var: l_var.item(),
        l_cov: l_cov.item(),
        total: total.item(),
        sinkhorn_iterations: plan.iterations,
        marginal_error: plan.marginal_error,
        feat_std,
    };
    Ok(ForwardOutput { total, breakdown, bn_stats })
}

/// Mean over columns of the unbiased column standard deviation of an `n×D` matrix.
pub fn mean_column_std(q: &Tensor) -> f64 {
    let [n, d] = *q.shape() else { return 0.0 };
    if n < 2 || d == 0 {
        return 0.0;
    }
    let x = q.data();
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|r| x[r * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x[r * d + j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        total += var.sqrt();
    }
    total / d as f64
}

/// Dense feature map of a single `1×h×w` image.
pub fn encode(store: &ParamStore, cfg: &ModelConfig, image: &Tensor) -> Result<FeatureMap, ModelError> {
    let graph = Graph::new();
    let bound = store.bind_frozen(&graph);
    let z = encode_batch(&bound, cfg, graph.constant(image.clone()))?;
    let t = z.value().clone();
    Ok(FeatureMap::new(t)?)
}

/// Pooled encoder features `N×d` of images `N×1×h×w`, evaluated in chunks.
pub fn pooled_features(store: &ParamStore, cfg: &ModelConfig, images: &Tensor) -> Result<Tensor, ModelError> {
    eval_chunks(images, |graph, bound, x| pool(encode_batch(bound, cfg, graph.constant(x))?), store)
}

/// Expander embeddings `N×D` with BN in evaluation mode.
pub fn embeddings(store: &ParamStore, cfg: &ModelConfig, images: &Tensor) -> Result<Tensor, ModelError> {
    eval_chunks(
        images,
        |graph, bound, x| {
            let g = pool(encode_batch(bound, cfg, graph.constant(x))?)?;
            Ok(expand(bound, cfg, g, BnMode::Eval, store)?.0)
        },
        store,
    )
}

fn eval_chunks(
    images: &Tensor,
    f: impl for<'g> Fn(&'g Graph, &Bound<'g>, Tensor) -> Result<Var<'g>, ModelError>,
    store: &ParamStore,
) -> Result<Tensor, ModelError> {
    const CHUNK: usize = 128;
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(ModelError::Config(format!("expected N x 1 x h x w images, got {shape:?}")));
    }
    let (n, per) = (shape[0], shape[1..].iter().product::<usize>());
    let mut rows = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let mut cshape = shape.to_vec();
        cshape[0] = len;
        let chunk = Tensor::from_vec(cshape, images.data()[start * per..(start + len) * per].to_vec())?;
        let graph = Graph::new();
        let bound = store.bind_frozen(&graph);
        let out = f(&graph, &bound, chunk)?;
        let v = out.value();
        width = v.shape()[1];
        rows.extend_from_slice(v.data());
    }
    Ok(Tensor::from_vec(vec![n, width], rows)?)
}
