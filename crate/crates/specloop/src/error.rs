//! Crate-wide error type.
//!
//! Errors fall into two broad classes that callers (notably the CLI) care
//! about: *usage* errors (bad arguments, bad config — the caller asked for
//! something invalid) and *integrity* errors (internal invariants broken at
//! runtime — corrupted traces, non-finite parameters, clock regressions).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // --- usage errors ---
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("hidden features required but not provided (drafter conditions on them)")]
    MissingHidden,

    #[error("k = {k} out of range for vocabulary of size {vocab}")]
    KOutOfRange { k: usize, vocab: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prompt too short: need at least 2 tokens, got {0}")]
    PromptTooShort(usize),

    #[error("invalid configuration:\n{}", issues.join("\n"))]
    InvalidConfig { issues: Vec<String> },

    // --- integrity errors ---
    #[error("KL divergence overflow: candidate has zero mass where reference has positive mass")]
    KlOverflow,

    #[error("malformed tree: {0}")]
    MalformedTree(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("unsupported trace schema version {got} (expected {expected})")]
    SchemaMismatch { expected: u32, got: u32 },

    #[error("negative staleness: learner version {learner} behind record version {record}")]
    NegativeStaleness { learner: u64, record: u64 },

    #[error("integrity violation: {0}")]
    Integrity(String),

    // --- environment ---
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by invalid caller input (CLI maps these to
    /// exit code 2, runtime integrity failures to exit code 1).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::TokenOutOfRange { .. }
                | Error::DimensionMismatch { .. }
                | Error::MissingHidden
                | Error::KOutOfRange { .. }
                | Error::InvalidArgument(_)
                | Error::PromptTooShort(_)
                | Error::InvalidConfig { .. }
        )
    }
}
