use thiserror::Error;

/// Errors produced by the twin, the placement sweep and the predictor.
#[derive(Debug, Error)]
pub enum Error {
    /// An input document or value violates its schema or invariants.
    /// `field` is a JSON-path-like locator of the offending field.
    #[error("validation error at `{field}`: {reason}")]
    Validation { field: String, reason: String },

    /// The server configuration is incomplete or inconsistent
    /// (unknown rank in a table, zero KV capacity, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An estimator was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Least-squares fitting failed.
    #[error("fitting error: {0}")]
    Fit(String),

    /// The simulation reached a state it cannot make progress from.
    #[error("simulation error: {0}")]
    Simulation(String),

    /// An internal invariant was violated (checked mode or cache misuse).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Model training failed.
    #[error("training error: {0}")]
    Training(String),

    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Fit(_) => "fit",
            Error::Simulation(_) => "simulation",
            Error::Invariant(_) => "invariant",
            Error::Training(_) => "training",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
