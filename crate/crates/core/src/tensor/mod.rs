//! Dense `f64` arrays, a reverse-mode tape, AdamW, and checkpoints.

mod array;
pub mod checkpoint;
mod optim;
mod tape;

pub use array::DenseArray;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_VERSION};
pub use optim::{adamw_step, interpolate_params, Gradients, OptimConfig, ParamStore};
pub use tape::{log_sum_exp, softmax, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("backward called before any forward computation on this tape")]
    NoForward,
    #[error("backward needs a single-valued output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
