use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}: line {line}: {message}")]
    Parse {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing metadata: {0}")]
    MissingMeta(String),

    #[error("missing distance for country pair {0}-{1}")]
    MissingDistance(String, String),

    #[error("year {0} is not present in the trade data")]
    MissingYear(i32),

    #[error("no data: {0}")]
    Empty(String),

    #[error("column `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("singular design matrix; linearly dependent column(s): {}", .0.join(", "))]
    Singular(Vec<String>),

    #[error("insufficient observations: n = {n}, k = {k} (need n > k)")]
    Undersized { n: usize, k: usize },

    #[error("product {0} is not covered by the concordance")]
    UnmappedProduct(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(source_name: &str, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.to_string(),
            line,
            message: message.into(),
        }
    }
}
