use thiserror::Error;

/// Errors produced anywhere in the inference, model container, and attestation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("division by zero")]
    ZeroDenominator,

    #[error("inverse square root requires a positive argument, got raw {0}")]
    NonPositiveInvSqrt(i64),

    #[error("exp lookup argument out of range: raw {0} not in [0, 8*ONE]")]
    ExpArgOutOfRange(i64),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("activation magnitude {0} overflows the 64-bit accumulator envelope")]
    AccumulatorOverflow(i64),

    #[error("position {pos} outside context of {max_ctx}")]
    ContextOverflow { pos: usize, max_ctx: usize },

    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("temperature must be positive, got raw {0}")]
    NonPositiveTemperature(i64),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("invalid tensor {name}: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("invalid lane count {0}: must be one of 1, 2, 4, 8")]
    InvalidLanes(usize),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed to build thread pool: {0}")]
    ThreadPool(String),
}

pub type Result<T> = std::result::Result<T, Error>;
