use std::path::PathBuf;

use thiserror::Error;

use crate::model::SampleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Conflict,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(SampleId),

    #[error("sample `{id}` references embedding row {index}, but only {rows} rows exist")]
    DanglingEmbedding { id: SampleId, index: usize, rows: usize },

    #[error("embedding row {index} is used by both `{first}` and `{second}`")]
    SharedEmbedding {
        index: usize,
        first: SampleId,
        second: SampleId,
    },

    #[error("embedding body holds {found} values, header declares {expected}")]
    TruncatedEmbeddings { expected: usize, found: usize },

    #[error("non-finite embedding value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("committee record `{id}` has {found} hypotheses, expected {expected}")]
    WrongArity {
        id: SampleId,
        expected: usize,
        found: usize,
    },

    #[error("committee record `{id}` has an invalid token entropy")]
    BadEntropy { id: SampleId },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("silhouette needs at least two clusters, found {0}")]
    TooFewClusters(usize),

    #[error("token entropies missing for `{0}`")]
    MissingEntropies(SampleId),

    #[error("correlation undefined: {0}")]
    Correlation(&'static str),

    #[error("no uncertainty score for {} sample(s): {}", .0.len(), join_ids(.0))]
    MissingScores(Vec<SampleId>),

    #[error("no committee artifact for {} sample(s): {}", .0.len(), join_ids(.0))]
    MissingArtifacts(Vec<SampleId>),

    #[error("no oracle transcription for {} sample(s): {}", .0.len(), join_ids(.0))]
    MissingOracleText(Vec<SampleId>),

    #[error("labels missing for {} batch id(s): {}", .0.len(), join_ids(.0))]
    IncompleteBatch(Vec<SampleId>),

    #[error("labels supplied for id(s) outside the batch: {}", join_ids(.0))]
    UnexpectedLabels(Vec<SampleId>),

    #[error("sample(s) already labeled: {}", join_ids(.0))]
    AlreadyLabeled(Vec<SampleId>),

    #[error("sample(s) not in the unlabeled pool: {}", join_ids(.0))]
    NotInPool(Vec<SampleId>),

    #[error("a batch is already pending for iteration {0}")]
    PendingBatch(u32),

    #[error("no batch is pending")]
    NoPendingBatch,

    #[error("state has no cluster assignment")]
    MissingClusters,

    #[error("task `{id}` already labeled with different text")]
    LabelConflict { id: SampleId },

    #[error("{0} task(s) still pending")]
    TasksPending(usize),

    #[error("unknown task `{0}`")]
    UnknownTask(SampleId),

    #[error("state file format_version {found}, this build reads {expected}")]
    Version { expected: u32, found: u32 },

    #[error("state config hash {found} does not match supplied config {expected}")]
    Integrity { expected: String, found: String },

    #[error("state file {0} is locked by another writer")]
    Locked(PathBuf),

    #[error("malformed state document: {0}")]
    StateFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::DuplicateId(_) => "duplicate_id",
            Error::DanglingEmbedding { .. } => "dangling_embedding",
            Error::SharedEmbedding { .. } => "shared_embedding",
            Error::TruncatedEmbeddings { .. } => "truncated_embeddings",
            Error::NonFinite { .. } => "non_finite",
            Error::WrongArity { .. } => "wrong_arity",
            Error::BadEntropy { .. } => "bad_entropy",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::TooFewClusters(_) => "too_few_clusters",
            Error::MissingEntropies(_) => "missing_entropies",
            Error::Correlation(_) => "undefined_correlation",
            Error::MissingScores(_) => "missing_scores",
            Error::MissingArtifacts(_) => "missing_artifacts",
            Error::MissingOracleText(_) => "missing_oracle_text",
            Error::IncompleteBatch(_) => "incomplete_batch",
            Error::UnexpectedLabels(_) => "unexpected_labels",
            Error::AlreadyLabeled(_) => "already_labeled",
            Error::NotInPool(_) => "not_in_pool",
            Error::PendingBatch(_) => "pending_batch",
            Error::NoPendingBatch => "no_pending_batch",
            Error::MissingClusters => "missing_clusters",
            Error::LabelConflict { .. } => "label_conflict",
            Error::TasksPending(_) => "tasks_pending",
            Error::UnknownTask(_) => "unknown_task",
            Error::Version { .. } => "version_mismatch",
            Error::Integrity { .. } => "integrity",
            Error::Locked(_) => "locked",
            Error::StateFormat(_) => "state_format",
            Error::Io { .. } => "io",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::AlreadyLabeled(_)
            | Error::PendingBatch(_)
            | Error::NoPendingBatch
            | Error::LabelConflict { .. }
            | Error::TasksPending(_)
            | Error::Locked(_)
            | Error::Integrity { .. } => ErrorKind::Conflict,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }
}

fn join_ids(ids: &[SampleId]) -> String {
    const SHOWN: usize = 8;
    let mut out = ids
        .iter()
        .take(SHOWN)
        .map(|id| id.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    if ids.len() > SHOWN {
        out.push_str(&format!(", ... (+{})", ids.len() - SHOWN));
    }
    out
}
