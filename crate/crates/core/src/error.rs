use std::fmt;

/// Where in an input stream a parse problem was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    /// 1-based line number in a text stream.
    Line(usize),
    /// Byte offset into a binary stream.
    ByteOffset(u64),
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Line(line) => write!(f, "line {line}"),
            Position::ByteOffset(offset) => write!(f, "byte offset {offset}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("occupation numbers sum to {actual}, expected {expected} photons")]
    OccupationSum { expected: u64, actual: u64 },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("moment order {requested} requested but only orders up to {available} are available")]
    InsufficientOrder { requested: usize, available: usize },

    #[error("histogram contains no trials")]
    EmptyHistogram,

    #[error("herald slice for {clicks} clicks on arm {arm} is empty")]
    EmptyHeraldSlice { arm: char, clicks: usize },

    #[error("significance is unbounded: eigenvalue {lambda:e} is negative with zero error")]
    UnboundedSignificance { lambda: f64 },

    #[error("eigensolver did not converge for a {dimension}x{dimension} matrix: {detail}")]
    NonConvergence { dimension: usize, detail: String },

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("malformed input at {position}: {reason}")]
    Parse { position: Position, reason: String },

    #[error("channel {channel} at {position} is out of range (max {max})")]
    ChannelOutOfRange {
        channel: u32,
        max: u8,
        position: Position,
    },

    #[error("no fit available for {what}")]
    MissingFit { what: String },

    #[error("coincidence windows overlap: {0}")]
    OverlappingWindows(String),

    #[error("time-tag stream is not time ordered at record {index}")]
    UnorderedStream { index: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }

    /// True for failures of the numerical machinery rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::NonFinite(_) | Error::UnboundedSignificance { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
