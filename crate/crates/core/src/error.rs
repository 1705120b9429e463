use std::path::PathBuf;

/// Errors raised anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent dimensions or an invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dimension mismatch detected inside the engine, tagged with the layer that failed.
    #[error("dimension mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    /// A call violated an operation precondition (empty batch, bad step size, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Client/server exchange was malformed (length or shape disagreement).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training produced a non-finite value.
    #[error("numerical failure in round {round}, client {client}: {detail}")]
    NonFinite {
        round: usize,
        client: usize,
        detail: String,
    },

    #[error("{}:{line}: {detail}", path.display())]
    Parse { path: PathBuf, line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from bad input/configuration rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape { .. } | Error::Usage(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
