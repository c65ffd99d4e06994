//! Crate-wide error type and process exit-code mapping.

use std::io;
use thiserror::Error;

/// Everything that can go wrong across the pipeline.
///
/// Variants are grouped by how the CLI reports them: usage and
/// configuration problems exit with code 1, data problems (unreadable or
/// malformed files, inventory mismatches) with code 2, and numerical
/// failures (divergence, no surviving path) with code 3.
#[derive(Debug, Error)]
pub enum Error {
    // --- usage / configuration (exit 1) ---
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("inventory has no blank label: {0}")]
    NotCtc(String),

    // --- data (exit 2) ---
    #[error("input too short: {0}")]
    InputTooShort(String),
    #[error("unknown label: {0}")]
    UnknownLabel(String),
    #[error("unknown phone: {0}")]
    UnknownPhone(String),
    #[error("phone not covered by any tree: {0}")]
    UncoveredPhone(String),
    #[error("lexicon gap: {0}")]
    LexiconGap(String),
    #[error("empty reference set")]
    EmptyReferenceSet,
    #[error("bad data: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    // --- numerical (exit 3) ---
    #[error("empty alignment set: {0}")]
    EmptyAlignmentSet(String),
    #[error("no paths through lattice: {0}")]
    NoPaths(String),
    #[error("no hypothesis reached a final state: {0}")]
    NoHypothesis(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    /// Exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidArchitecture(_)
            | Error::ShapeError(_)
            | Error::StaleCache(_)
            | Error::NotCtc(_) => 1,
            Error::InputTooShort(_)
            | Error::UnknownLabel(_)
            | Error::UnknownPhone(_)
            | Error::UncoveredPhone(_)
            | Error::LexiconGap(_)
            | Error::EmptyReferenceSet
            | Error::Data(_)
            | Error::Io { .. } => 2,
            Error::EmptyAlignmentSet(_)
            | Error::NoPaths(_)
            | Error::NoHypothesis(_)
            | Error::Divergence(_) => 3,
        }
    }

    /// Attach a path to a raw io error.
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
