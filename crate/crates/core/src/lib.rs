//! Self-supervised representation learning with entropic optimal transport
//! between dense feature maps, on a small CPU autodiff engine.
//!
//! The modules layer bottom up: [`tensor`] (arrays and reverse-mode graph),
//! [`ot`] (Sinkhorn and an exact transportation simplex), [`cvsim`] (marginals
//! from cross-view attention), [`vicreg`] (variance and covariance terms),
//! [`model`] (encoder, expander and the combined loss), [`pipeline`] (data,
//! augmentation and persistence) and [`trainer`] (optimizers, pretraining and
//! probes). [`config`] ties the knobs together and [`gradcheck`] verifies every
//! analytic gradient.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod config;
pub mod cvsim;
pub mod gradcheck;
pub mod model;
pub mod ot;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod vicreg;

pub use config::{Config, ConfigError};
pub use model::{ModelConfig, ModelError, ParamStore};
pub use ot::{Marginal, OtError, TransportPlan, TransportProblem};
pub use pipeline::{Checkpoint, PipelineError};
pub use tensor::{Graph, Tensor, TensorError, Var};
pub use trainer::{ProbeResult, TrainError, Trainer};
