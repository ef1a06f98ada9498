use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("bad image size: {0}")]
    BadImageSize(String),

    #[error("bad mask size: {0}")]
    BadMaskSize(String),

    #[error("image too small for SSIM window: {height}x{width} < {window}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("coverage bounds unsatisfiable after {retries} retries (scene {index})")]
    CoverageUnsatisfiable { index: u64, retries: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("non-finite loss at step {step}: l_fore={l_fore} l_back={l_back} frac_pos={frac_pos}")]
    NonFiniteLoss {
        step: usize,
        l_fore: f64,
        l_back: f64,
        frac_pos: f64,
    },

    #[error("AUROC needs both classes present")]
    SingleClass,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing checkpoint entry {0:?}")]
    MissingEntry(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
