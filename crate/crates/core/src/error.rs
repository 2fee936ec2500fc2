//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced across module boundaries.
///
/// Shape mismatches inside tensor expressions are programmer errors and
/// panic instead; these variants cover contract violations a caller can
/// cause with bad configuration, bad files, or bad prompts.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (e.g. even conv kernel, K mod N != 0).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid runtime input (e.g. empty audio, zero-power noise).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed or inconsistent data record.
    #[error("data error: {0}")]
    Data(String),

    /// Prompt/audio combination violates the mode rules.
    #[error("prompt error: {0}")]
    Prompt(String),

    /// Checkpoint or parameter-store problem; names the offending tensor.
    #[error("load error: {0}")]
    Load(String),

    /// Text that cannot be parsed into the expected structure.
    #[error("parse error: {0}")]
    Parse(String),

    /// Verification harness misuse (e.g. non-scalar objective).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training diverged; the last good checkpoint is preserved.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
