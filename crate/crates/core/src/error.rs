use crate::denoiser::SiteId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite matrix")]
    NonFinite,

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("site/step mismatch: override for {site} at step {step}")]
    SiteStepMismatch { site: SiteId, step: usize },

    #[error("cache not warmed")]
    CacheNotWarmed,

    #[error("dispersion undefined: condition {condition} has fewer than two samples")]
    DispersionUndefined { condition: usize },

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("trajectory cursor exhausted")]
    CursorExhausted,

    #[error("wrong history mode: expected {expected}, found {found}")]
    WrongMode {
        expected: &'static str,
        found: &'static str,
    },

    #[error("missing calibration operator for {0}")]
    MissingOperator(SiteId),

    #[error("policy fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("bad pack magic")]
    BadMagic,

    #[error("unsupported pack version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("unexpected end of pack")]
    UnexpectedEof,

    #[error("malformed pack: {0}")]
    MalformedPack(String),

    #[error("run mismatch: {0}")]
    RunMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
