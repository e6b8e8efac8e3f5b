//! Data side of training: per-sample random streams, view augmentation,
//! synthetic phantom images, PGM ingestion and checkpoint persistence.

mod augment;
mod checkpoint;
mod phantom;
mod pgm;
mod rng;

pub use augment::{augment, AugmentationSpec};
pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint, Checkpoint, LoadedCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use phantom::{gen_phantom_dataset, stack_images, PhantomMeta, PhantomSample, ShapeKind};
pub use pgm::{decode_pgm, encode_pgm, load_pgm, save_pgm};
pub use rng::{sample_rng, worker_pool};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl PipelineError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }
}
