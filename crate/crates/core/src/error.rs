use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate group: {0}")]
    DegenerateGroup(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("indivisible group count: {0}")]
    IndivisibleGroups(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("no forward record: {0}")]
    NoForwardRecord(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("uninitialized running statistics for {0}")]
    UninitializedStats(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
