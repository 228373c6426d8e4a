use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("schema error at slot {slot}: token {token} outside 0..{candidates}")]
    Schema {
        slot: usize,
        token: usize,
        candidates: usize,
    },

    #[error("schema error: expected {expected} tokens, got {actual}")]
    SchemaLength { expected: usize, actual: usize },

    #[error(
        "ordering constraint violated: group {smaller} (size {smaller_size}) has ratio {smaller_ratio} \
         > group {larger} (size {larger_size}) ratio {larger_ratio}"
    )]
    Constraint {
        smaller: usize,
        larger: usize,
        smaller_size: usize,
        larger_size: usize,
        smaller_ratio: f64,
        larger_ratio: f64,
    },

    #[error("invalid ratios: {0}")]
    Ratios(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },

    #[error("batch error: {0}")]
    Batch(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("ingestion error at row {row}: {reason}")]
    Ingestion { row: usize, reason: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("compile error: {0}")]
    Compile(String),

    #[error("weighting error: group {group} has ratio 0 but appears in the batch")]
    Weighting { group: usize },

    #[error("evaluation error: group {group} has no validation samples")]
    EmptyGroup { group: usize },

    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is numeric (NaN/Inf, divergence) rather than config or IO.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Diverged { .. })
    }

    /// Whether the failure came from the filesystem.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Csv { .. } | Error::Checkpoint(_)
        )
    }
}
