//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by lattice evaluation, gradient computation, decoding,
/// the experiment harness, and file I/O.
#[derive(Debug, Error)]
pub enum TdtError {
    /// The input has zero frames; no lattice can be built.
    #[error("input has zero frames")]
    EmptyInput,

    /// A duration set violated its invariants.
    #[error("invalid duration set: {0}")]
    InvalidDurations(String),

    /// A tensor did not have the shape implied by (T, U, V, N_d).
    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A target token index is outside [0, V).
    #[error("target[{index}] = {value} is out of range for vocabulary size {vocab}")]
    InvalidTarget {
        index: usize,
        value: usize,
        vocab: usize,
    },

    /// A scalar argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Exhaustive enumeration would visit more paths than the cap allows.
    /// Enumeration refuses rather than truncating.
    #[error("path enumeration refused: {paths} paths exceed cap {cap}")]
    PathCapExceeded { paths: u64, cap: u64 },

    /// A loss evaluation produced a non-finite value where a finite one is
    /// required (finite differences, gradient computation).
    #[error("loss is not finite{}", match .step { Some(s) => format!(" at step {s}"), None => String::new() })]
    NonFiniteLoss { step: Option<usize> },

    /// The optimization loop diverged.
    #[error("optimization diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    /// A file did not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    /// A file declared a format version this build does not understand.
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    /// The payload length does not match what the header promises.
    #[error("size mismatch: header implies {expected} bytes of payload, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TdtError>;
