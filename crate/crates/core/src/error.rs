//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context} (expected {expected}, got {got})")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("zero-dimension shape {shape:?}")]
    EmptyShape { shape: Vec<usize> },

    #[error("kernel larger than input along {axis} axis ({kernel} > {input})")]
    KernelTooLarge {
        axis: &'static str,
        kernel: usize,
        input: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite gradient in tensor '{name}'")]
    NonFiniteGradient { name: String },

    #[error("backward pass requested without a matching forward cache: {0}")]
    MissingForwardCache(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("file truncated while reading {reading}")]
    Truncated { reading: String },

    #[error("shape/payload mismatch for tensor '{name}': header says {expected} values, payload has {got}")]
    ShapePayloadMismatch {
        name: String,
        expected: usize,
        got: usize,
    },

    #[error("record count mismatch: header declares {declared}, payload holds {found}")]
    CountMismatch { declared: u64, found: u64 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("channel {channel} has zero variance; cannot normalize")]
    ZeroVariance { channel: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("sample from domain {got:?} not allowed here (expected {expected:?})")]
    DomainMismatch { expected: String, got: String },

    #[error("dataset cannot be balanced: {0}")]
    Unbalanceable(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("track generation infeasible: {0}")]
    InfeasibleTrack(String),

    #[error("recovery episode did not converge: {0}")]
    NotConverged(String),

    #[error("expert left the driving corridor: {0}")]
    ExpertLeftCorridor(String),

    #[error("missing artifact: {path} (run `{produced_by}` first)")]
    MissingArtifact { path: String, produced_by: String },

    #[error("run directory is locked by another command: {0}")]
    LockHeld(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    /// 1 usage/config, 2 missing artifact, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact { .. } => 2,
            Error::NonFiniteGradient { .. }
            | Error::UndefinedCorrelation(_)
            | Error::ZeroVariance { .. } => 3,
            _ => 1,
        }
    }
}
