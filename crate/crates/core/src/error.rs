use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("point ({x}, {y}) lies outside the window")]
    PointOutsideWindow { x: f64, y: f64 },

    #[error("invalid partition levels: {0}")]
    InvalidLevels(String),

    #[error("invalid rate vector: {0}")]
    InvalidRates(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("local covariance not positive definite at site {site} even after jitter")]
    NotPositiveDefinite { site: usize },

    #[error("latent field has no value at an active site")]
    MissingLatentValue,

    #[error("attempted to prune a data site")]
    PruneDataSite,

    #[error("empty point pattern: {0}")]
    EmptyPattern(String),

    #[error("consistency audit failed: {0}")]
    Audit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error at line {line}: {reason}")]
    Input { line: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Whether this error stems from user-supplied configuration or input
    /// rather than from a failure during computation.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidWindow(_)
                | Error::InvalidLevels(_)
                | Error::InvalidRates(_)
                | Error::InvalidParameter { .. }
                | Error::Input { .. }
                | Error::EmptyPattern(_)
                | Error::PointOutsideWindow { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
