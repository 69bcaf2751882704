//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("input too small for {op}: {detail}")]
    InputTooSmall { op: &'static str, detail: String },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("degenerate similarity map: {0}")]
    DegenerateMap(String),

    #[error("KL support violation: q = 0 where s > 0 at flat index {0}")]
    SupportViolation(usize),

    #[error("degenerate denominator in {op}: modulus {value} below guard {guard}")]
    DegenerateDenominator {
        op: &'static str,
        value: f64,
        guard: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("similarity maps are misaligned: {0}")]
    Misaligned(String),

    #[error("sequence has too few usable frames: {0}")]
    InsufficientFrames(String),

    #[error("box out of frame or degenerate: {0}")]
    BadBox(String),

    #[error("tracker state not initialized")]
    Uninitialized,

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("malformed data in {path}: {detail}")]
    Malformed { path: String, detail: String },

    #[error("no valid frames to aggregate")]
    NoValidFrames,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
