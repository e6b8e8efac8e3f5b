//! Self-supervised pretraining loop, optimizers, metrics, probes and collapse diagnostics.

mod optim;
mod probe;

pub use optim::{lars_update, OptimConfig, Optimizer, OptimizerKind};
pub use probe::{compute_auc, linear_probe, stratified_subset, LabeledSet, ProbeConfig, ProbeProtocol, ProbeResult};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::Config;
use crate::model::{embeddings, forward_loss, mean_column_std, LossBreakdown, LossWeights, ModelError, ParamStore};
use crate::pipeline::{augment, sample_rng, save_checkpoint, worker_pool, Checkpoint, PipelineError};
use crate::tensor::{BatchStats, Graph, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("pipeline: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("trainer: {0}")]
    Config(String),
    #[error("trainer: subset error: {0}")]
    Subset(String),
    #[error("trainer: degenerate input: {0}")]
    Degenerate(String),
    #[error("trainer: io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::Model(e) if e.is_numerical())
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io { path: path.display().to_string(), source }
    }
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// `None` selects the optimizer's default rate.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub trust_coeff: f64,
    /// Linear warmup length in steps (0 disables).
    pub warmup: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Metrics CSV path; empty means `<checkpoint>.metrics.csv`.
    pub metrics: String,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Record wall time per step in the metrics (breaks byte-identical CSVs).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            optimizer: OptimizerKind::Lars,
            lr: None,
            weight_decay: 1e-4,
            momentum: 0.9,
            trust_coeff: 1e-3,
            warmup: 0,
            weights: LossWeights::default(),
            seed: 0,
            metrics: String::new(),
            checkpoint_every: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.optimizer.default_lr())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate() > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        let w = self.weights;
        if !(w.alpha >= 0.0 && w.beta >= 0.0 && w.eta >= 0.0) {
            return Err(TrainError::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

pub const METRICS_HEADER: &str = "step,l_ot,l_var,l_cov,total,feat_std,sink_iters,marg_err,ms";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub ms: u64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, l.l_ot, l.l_var, l.l_cov, l.total, l.feat_std, l.sinkhorn_iterations, l.marginal_error, self.ms
        )
    }
}

/// Gradients and diagnostics of one forward/backward pass, before any update.
pub struct StepGradients {
    pub loss: LossBreakdown,
    pub grads: BTreeMap<String, Tensor>,
    pub bn_stats: Vec<(String, BatchStats)>,
}

pub struct Trainer {
    pub config: Config,
    pub store: ParamStore,
    optimizer: Optimizer,
    step: u64,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        let store = ParamStore::init(&config.model, config.train.seed)?;
        let t = &config.train;
        let optimizer = Optimizer::new(OptimConfig {
            kind: t.optimizer,
            lr: t.learning_rate(),
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            trust_coeff: t.trust_coeff,
        });
        Ok(Self { config, store, optimizer, step: 0 })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn lr_at(&self, step: u64) -> f64 {
        let t = &self.config.train;
        let base = t.learning_rate();
        if t.warmup == 0 {
            base
        } else {
            base * ((step + 1) as f64 / t.warmup as f64).min(1.0)
        }
    }

    /// Two augmented views of a batch drawn from `data` for the current step.
    /// Every view has its own random stream, so the result does not depend on the worker count.
    pub fn make_views(&self, data: &[Tensor]) -> Result<(Tensor, Tensor), TrainError> {
        let n = self.config.train.batch_size;
        if data.len() < n {
            return Err(TrainError::Config(format!("dataset has {} images, batch size is {n}", data.len())));
        }
        let seed = self.config.train.seed;
        let idx = sample(&mut sample_rng(seed, &[self.step, 0]), data.len(), n).into_vec();
        let spec = &self.config.augment;
        let step = self.step;
        let views: Vec<Result<Tensor, PipelineError>> = worker_pool().install(|| {
            (0..2 * n)
                .into_par_iter()
                .map(|k| {
                    let (view, slot) = (k / n, k % n);
                    let mut rng = sample_rng(seed, &[step, 1, slot as u64, view as u64]);
                    augment(&data[idx[slot]], spec, &mut rng)
                })
                .collect()
        });
        let views = views.into_iter().collect::<Result<Vec<_>, _>>()?;
        let s = Tensor::stack(&views[..n])?;
        let t = Tensor::stack(&views[n..])?;
        Ok((s, t))
    }

    /// Forward and backward on given views without touching the parameters.
    pub fn gradients(&self, views_s: &Tensor, views_t: &Tensor) -> Result<StepGradients, TrainError> {
        let graph = Graph::new();
        let bound = self.store.bind(&graph);
        let c = &self.config;
        let out = forward_loss(&graph, &bound, &self.store, &c.model, &c.ot, &c.train.weights, views_s, views_t)?;
        graph.backward(out.total).map_err(ModelError::from)?;
        Ok(StepGradients { loss: out.breakdown, grads: self.store.grads(&bound), bn_stats: out.bn_stats })
    }

    pub fn train_step(&mut self, data: &[Tensor]) -> Result<MetricsRow, TrainError> {
        let start = Instant::now();
        let (vs, vt) = self.make_views(data)?;
        let StepGradients { loss, grads, bn_stats } = self.gradients(&vs, &vt)?;
        let lr = self.lr_at(self.step);
        self.optimizer.step(&mut self.store.params, &grads, lr);
        self.store.update_running(&bn_stats, self.config.model.bn_momentum);
        self.step += 1;
        let ms = if self.config.train.log_wall_time { start.elapsed().as_millis() as u64 } else { 0 };
        Ok(MetricsRow { step: self.step, loss, ms })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        store_to_checkpoint(&self.store, self.step, self.config.render())
    }
}

pub fn store_to_checkpoint(store: &ParamStore, step: u64, config: String) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    for (k, v) in &store.params {
        tensors.insert(format!("param/{k}"), v.clone());
    }
    for (k, v) in &store.buffers {
        tensors.insert(format!("buffer/{k}"), v.clone());
    }
    Checkpoint { tensors, step, config }
}

pub fn store_from_checkpoint(ckpt: &Checkpoint) -> Result<ParamStore, TrainError> {
    let mut store = ParamStore::default();
    for (k, v) in &ckpt.tensors {
        if let Some(name) = k.strip_prefix("param/") {
            store.params.insert(name.to_string(), v.clone());
        } else if let Some(name) = k.strip_prefix("buffer/") {
            store.buffers.insert(name.to_string(), v.clone());
        } else {
            return Err(TrainError::Config(format!("unexpected checkpoint entry `{k}`")));
        }
    }
    Ok(store)
}

pub struct PretrainSummary {
    pub steps: u64,
    pub last: Option<MetricsRow>,
}

/// Full pretraining run: metrics CSV row per step, checkpoints at the configured
/// cadence and at the end.
pub fn run_pretraining(
    config: Config,
    data: &[Tensor],
    checkpoint_path: &Path,
    metrics_path: &Path,
) -> Result<(Trainer, PretrainSummary), TrainError> {
    let mut trainer = Trainer::new(config)?;
    let file = std::fs::File::create(metrics_path).map_err(|e| TrainError::io(metrics_path, e))?;
    let mut csv = std::io::BufWriter::new(file);
    writeln!(csv, "{METRICS_HEADER}").map_err(|e| TrainError::io(metrics_path, e))?;
    let steps = trainer.config.train.steps;
    let every = trainer.config.train.checkpoint_every;
    let mut last = None;
    for _ in 0..steps {
        let row = trainer.train_step(data)?;
        writeln!(csv, "{}", row.csv()).map_err(|e| TrainError::io(metrics_path, e))?;
        if row.step % 100 == 0 {
            csv.flush().map_err(|e| TrainError::io(metrics_path, e))?;
            log::info!("step {} total {:.5} ot {:.5} var {:.5} cov {:.5}", row.step, row.loss.total, row.loss.l_ot, row.loss.l_var, row.loss.l_cov);
        }
        if every > 0 && row.step % every as u64 == 0 {
            save_checkpoint(&trainer.checkpoint(), checkpoint_path)?;
        }
        last = Some(row);
    }
    csv.flush().map_err(|e| TrainError::io(metrics_path, e))?;
    save_checkpoint(&trainer.checkpoint(), checkpoint_path)?;
    let summary = PretrainSummary { steps: trainer.step, last };
    Ok((trainer, summary))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    /// Mean per-dimension standard deviation of the embeddings.
    pub feat_std: f64,
    pub effective_rank: f64,
}

/// Embedding diagnostics on `images` (`N×1×h×w`), BN in evaluation mode.
pub fn collapse_report(store: &ParamStore, config: &Config, images: &Tensor) -> Result<CollapseReport, TrainError> {
    let q = embeddings(store, &config.model, images)?;
    Ok(CollapseReport { feat_std: mean_column_std(&q), effective_rank: effective_rank(&q) })
}

/// `exp(H(p))` with `p` the singular values of the `n×D` matrix normalized to sum 1.
/// Zero for an all-zero matrix.
pub fn effective_rank(m: &Tensor) -> f64 {
    let [n, d] = *m.shape() else { return 0.0 };
    if n == 0 || d == 0 {
        return 0.0;
    }
    let sv = DMatrix::from_row_slice(n, d, m.data()).singular_values();
    let total: f64 = sv.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    let h: f64 = sv.iter().map(|s| s / total).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
    h.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_rank_examples() {
        let same = Tensor::from_fn(&[5, 3], |k| [0.2, -1.0, 3.0][k % 3]);
        assert!((effective_rank(&same) - 1.0).abs() < 1e-12);
        assert!((effective_rank(&Tensor::eye(6)) - 6.0).abs() < 1e-12);
        let q = crate::cvsim::orthogonal(5, &mut sample_rng(1, &[]));
        assert!((effective_rank(&q) - 5.0).abs() < 1e-9);
        assert_eq!(effective_rank(&Tensor::zeros(&[3, 3])), 0.0);
    }

    #[test]
    fn metrics_row_format() {
        let row = MetricsRow {
            step: 3,
            loss: LossBreakdown {
                l_ot: 0.5,
                l_var: 1.25,
                l_cov: 0.0,
                total: 31.55,
                sinkhorn_iterations: 50,
                marginal_error: 1e-7,
                feat_std: 0.75,
            },
            ms: 0,
        };
        assert_eq!(row.csv(), "3,0.5,1.25,0,31.55,0.75,50,0.0000001,0");
        assert_eq!(METRICS_HEADER.split(',').count(), row.csv().split(',').count());
    }
}
