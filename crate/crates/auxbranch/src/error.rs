//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("loss node must be scalar (1x1), got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("CTC target infeasible: needs at least {needed} frames but T = {frames}")]
    CtcInfeasible { frames: usize, needed: usize },

    #[error("CTC target contains blank id {blank} at position {pos}")]
    BlankInTarget { blank: usize, pos: usize },

    #[error("enumeration oracle instance too large: T = {frames}, |vocab| = {vocab} (limits: T <= 8, |vocab| <= 5)")]
    OracleTooLarge { frames: usize, vocab: usize },

    #[error("non-deterministic loss builder: two forward passes differ ({0})")]
    NonDeterministic(String),

    #[error("non-finite gradient in parameter '{name}' at step {step}")]
    NanGradient { name: String, step: u64 },

    #[error("training diverged: non-finite loss at step {step}")]
    NanLoss { step: u64 },

    #[error("token id {id} out of range (vocab size {vocab})")]
    IdOutOfRange { id: usize, vocab: usize },

    #[error("row {row} is not a normalized distribution (sum = {sum})")]
    Unnormalized { row: usize, sum: f64 },

    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("missing tensor '{name}' in {source_name}")]
    MissingTensor { name: String, source_name: String },

    #[error("tensor '{name}' has shape {got} but expected {expected}")]
    TensorShape {
        name: String,
        expected: String,
        got: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}
