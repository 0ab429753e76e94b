use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tile {tile:?} does not divide grid {grid:?} exactly")]
    NonDivisibleTile {
        grid: (usize, usize, usize),
        tile: (usize, usize, usize),
    },

    #[error("index {index} out of range for {len} tokens")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("query block {block} has no allowed key block")]
    EmptyQueryRow { block: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("row {row} of the probability map sums to {sum}, expected 1")]
    NotRowStochastic { row: usize, sum: f64 },

    #[error("frame-group boundaries differ between configs")]
    GroupBoundaryMismatch,

    #[error("attention map needs at least two frames for temporal analysis")]
    SingleFrame,

    #[error("map is incompatible with search parameters: {0}")]
    IncompatibleGrid(String),

    #[error("no attention dump for layer {layer}, head {head}, step {step}")]
    MissingDump {
        layer: usize,
        head: usize,
        step: usize,
    },

    #[error("{field} = {value} exceeds the grid limit {limit}")]
    ExtentTooLarge {
        field: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("invalid parameter {field}: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("{0} unexpected trailing bytes")]
    TrailingData(usize),

    #[error("schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for I/O and file-format failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::UnsupportedDtype(_)
            | Error::TruncatedPayload { .. }
            | Error::TrailingData(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
