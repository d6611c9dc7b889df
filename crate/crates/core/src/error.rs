use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants split into two classes: validation problems (bad input, unsupported
/// request) and numerical failures detected while computing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("degenerate statistic: coordinate {j} has variance {variance:e}")]
    Degenerate { j: usize, variance: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by the caller's input rather than by computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Domain(_)
                | Error::Usage(_)
                | Error::Unsupported(_)
                | Error::Json(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
