use std::path::PathBuf;

use crate::agent::AgentRole;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("zero-norm vector")]
    ZeroNormVector,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("residual needs equal token counts: pose has {pose_rows} rows, image has {image_rows}")]
    ShapeMismatchForResidual { pose_rows: usize, image_rows: usize },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("missing input for {role}: {what}")]
    MissingInput { role: AgentRole, what: &'static str },

    #[error("backend timed out after {attempts} attempt(s)")]
    BackendTimeout { attempts: u32 },

    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },

    #[error("no scripted response for role {role} and image {image_ref:?}")]
    FixtureMiss { role: AgentRole, image_ref: String },

    #[error("unparseable verdict: {0:?}")]
    UnparseableVerdict(String),

    #[error("{0} returned an empty response")]
    EmptyResponse(AgentRole),

    #[error("embedder failure: {0}")]
    EmbedderFailure(String),

    #[error("fused scores do not cover the pool: {0}")]
    CoverageMismatch(String),

    #[error("no qrels for query {0:?}")]
    MissingQrels(String),

    #[error("empty relevant set for query {0:?}")]
    EmptyRelevant(String),

    #[error("query {query_id:?} has no tag {tag:?}")]
    UnknownTag { tag: String, query_id: String },

    #[error("insufficient pairs for {role}: requested {requested}, available {available} (short by {})", requested - available)]
    InsufficientPairs {
        role: AgentRole,
        requested: usize,
        available: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of an agent or embedding backend, which the cascade
    /// absorbs by falling back to structural scoring.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            Error::BackendTimeout { .. }
                | Error::BackendUnavailable { .. }
                | Error::FixtureMiss { .. }
                | Error::UnparseableVerdict(_)
                | Error::EmptyResponse(_)
                | Error::EmbedderFailure(_)
        )
    }
}
