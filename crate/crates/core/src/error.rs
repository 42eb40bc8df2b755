use std::path::PathBuf;

use crate::sql_logic::PatternId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed record{}: {reason}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    MalformedRecord { line: Option<usize>, reason: String },

    #[error("column index {column} out of range for table with {headers} headers")]
    SchemaMismatch { column: usize, headers: usize },

    #[error("unknown table id `{0}`")]
    UnknownTable(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("retrieval index is empty")]
    EmptyIndex,

    #[error("no records to evaluate")]
    EmptyEval,

    #[error("requested {requested} examples but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("pattern {pattern} has {available} examples, {requested} requested")]
    InsufficientPattern {
        pattern: PatternId,
        available: usize,
        requested: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no pointer candidates left for slot {slot}")]
    EmptyCandidates { slot: usize },

    #[error("gold query pattern does not match the template")]
    PatternMismatch,

    #[error("condition {0} has no aligned value span")]
    UnalignedValue(usize),

    #[error("anchor {0} has no other example sharing its pattern")]
    NoPositiveAvailable(usize),

    #[error("anchor {0} has no example with a different pattern")]
    NoNegativeAvailable(usize),

    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },

    #[error("incompatible file: {0}")]
    VersionMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(line: Option<usize>, reason: impl Into<String>) -> Self {
        Error::MalformedRecord {
            line,
            reason: reason.into(),
        }
    }
}
