use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("bit width {0} outside 2..=16")]
    InvalidBitWidth(u32),

    #[error("q-format {0} outside 0..=30")]
    InvalidQFormat(i64),

    #[error("cannot rescale from q{from} up to q{to}")]
    InvalidRescale { from: u8, to: u8 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid batch-norm parameters: {0}")]
    InvalidBatchNorm(String),

    #[error("q-format mismatch at layer {layer}: expected q{expected}, got q{actual}")]
    QFormatMismatch { layer: usize, expected: i32, actual: i32 },

    #[error("export failed: {0}")]
    Export(String),

    #[error("clip too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("unsupported audio: {0}")]
    Audio(String),

    #[error("pipeline contract violated: {0}")]
    Pipeline(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("step {step} outside 0..={total}")]
    InvalidStep { step: usize, total: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what} file: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}
