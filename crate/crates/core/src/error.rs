use std::path::PathBuf;

/// Errors raised across the crate. Each message starts with a stable
/// kebab-case tag so callers and logs can match on it.
#[derive(Debug, thiserror::Error)]
pub enum CoprError {
    #[error("empty-task: task {0} has no examples")]
    EmptyTask(usize),

    #[error("empty-sequence: no task records found")]
    EmptySequence,

    #[error("rank-collision: line {line}: duplicate rank {rank} in example {prompt_id}")]
    RankCollision {
        line: usize,
        prompt_id: String,
        rank: usize,
    },

    #[error("malformed-record: line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("invalid-example: {prompt_id}: {reason}")]
    InvalidExample { prompt_id: String, reason: String },

    #[error("rank-out-of-range: rank {rank} not in 1..={size}")]
    RankOutOfRange { rank: usize, size: usize },

    #[error("unknown-pair: ({prompt_id}, {response_id}) is not registered in the tabular policy")]
    UnknownPair {
        prompt_id: String,
        response_id: String,
    },

    #[error("dimension-mismatch: expected feature dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no-value-head: the model has no preference scoring head")]
    NoValueHead,

    #[error("numeric-overflow: non-finite value produced by `{op}`")]
    NumericOverflow { op: &'static str },

    #[error("missing-anchor: replay item for {prompt_id} has no frozen target")]
    MissingAnchor { prompt_id: String },

    #[error("unlabeled-data: task {0} has no preference ranks; relabel it with a scorer first")]
    UnlabeledData(usize),

    #[error("incompatible-snapshot: parameter length {model} vs anchor {anchor}")]
    IncompatibleSnapshot { model: usize, anchor: usize },

    #[error("invalid-fisher: entry {index} is {value}")]
    InvalidFisher { index: usize, value: f64 },

    #[error("incomplete-row: score matrix row {0} is not fully populated")]
    IncompleteRow(usize),

    #[error("undefined-at-first-task: metric requires k >= 2")]
    UndefinedAtFirstTask,

    #[error("too-many-groups: {groups} groups requested for {domains} domains")]
    TooManyGroups { groups: usize, domains: usize },

    #[error("fit-failed: scorer for domain {domain} stalled at loss {loss:.4}")]
    FitFailed { domain: usize, loss: f64 },

    #[error("non-finite-loss: step {step}, component {component}")]
    NonFiniteLoss { step: usize, component: &'static str },

    #[error("stale-benchmark: {path} hashes to {actual}, manifest records {expected}")]
    StaleBenchmark {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("invalid-config: {0}")]
    InvalidConfig(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoprError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoprError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoprError>;
