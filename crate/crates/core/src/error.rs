use std::path::PathBuf;

/// Errors shared by the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("conv2d: unsupported kernel size {0} (only 1 and 3)")]
    UnsupportedKernel(usize),

    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss term '{term}' is non-finite ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("part masks violate the partition invariant at pixel ({row},{col})")]
    MaskPartition { row: usize, col: usize },

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("matrix is not symmetric within {tol:e} (max asymmetry {max:e})")]
    NotSymmetric { tol: f64, max: f64 },

    #[error("{0}")]
    Numeric(String),

    #[error("figure leaves the canvas: {0}")]
    OffCanvas(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
