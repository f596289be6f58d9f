//! Crate-wide error type and the process exit-code contract.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("function is not deterministic: two evaluations at the same point differ ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("frame layout mismatch: {0}")]
    FrameLayout(String),

    #[error("empty context set: at least one context view is required")]
    EmptyContext,

    #[error("attention mask leaves query row {row} with no unmasked key")]
    AllKeysMasked { row: usize },

    #[error("scene generation failed: {0}")]
    Scene(String),

    #[error("camera sampling could not satisfy the {min_angle_deg} deg separation after {tries} tries")]
    CameraSeparation { min_angle_deg: f64, tries: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version: file has {found}, this build reads {expected}")]
    Version { expected: u32, found: u32 },

    #[error("data mismatch: {0}")]
    DataMismatch(String),

    #[error("checkpoint config hash mismatch: checkpoint {found:#018x}, current config {expected:#018x}")]
    ConfigHash { expected: u64, found: u64 },

    #[error("training aborted at step {step}: non-finite loss")]
    NonFiniteLoss { step: usize },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("probe isolation violated: parameter `{0}` changed during probe training")]
    IsolationViolated(String),

    #[error("held-out split overlaps the training split: shared scene seed {0}")]
    SplitOverlap(u64),

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit-code contract: 1 usage, 2 verification failure, 3 I/O or data error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::UnknownKey(_) | Error::Config(_) => 1,
            Error::Verification(_) | Error::IsolationViolated(_) | Error::NonDeterministic { .. } => 2,
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::DataMismatch { .. }
            | Error::ConfigHash { .. }
            | Error::SplitOverlap(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
