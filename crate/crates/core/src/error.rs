use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("degenerate batch: kernel weights need at least 2 rows, got {n}")]
    DegenerateBatch { n: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("idx: bad magic {found:#010x} at offset {offset}")]
    IdxBadMagic { found: u32, offset: usize },

    #[error("idx: truncated at offset {offset}: expected {expected} bytes, found {found}")]
    IdxTruncated {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("idx: dimension overflow at offset {offset}")]
    IdxOverflow { offset: usize },

    #[error("missing data file {0}")]
    MissingFile(PathBuf),

    #[error("{what}: expected {expected} items, found {found}")]
    CountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("checkpoint: bad magic")]
    CheckpointMagic,

    #[error("checkpoint: unsupported version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint: truncated section {section:?} at offset {offset}")]
    CheckpointTruncated { section: String, offset: usize },

    #[error("checkpoint: crc mismatch in section {0:?}")]
    CheckpointCrc(String),

    #[error("checkpoint: unknown section {0:?}")]
    CheckpointUnknownSection(String),

    #[error("checkpoint: section {section:?} has inconsistent shape: {detail}")]
    CheckpointShape { section: String, detail: String },

    #[error("checkpoint: missing section {0:?}")]
    CheckpointMissing(String),

    #[error("value {value} out of range [0, 1] at image {image}, pixel {pixel}")]
    PixelRange {
        value: f64,
        image: usize,
        pixel: usize,
    },

    #[error("training aborted at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 for validation and check failures, 2 for I/O and
    /// format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::Json(_)
            | Error::MissingFile(_)
            | Error::IdxBadMagic { .. }
            | Error::IdxTruncated { .. }
            | Error::IdxOverflow { .. }
            | Error::CheckpointMagic
            | Error::CheckpointVersion(_)
            | Error::CheckpointTruncated { .. }
            | Error::CheckpointCrc(_)
            | Error::CheckpointUnknownSection(_)
            | Error::CheckpointShape { .. }
            | Error::CheckpointMissing(_) => 2,
            Error::Training { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }
}
