use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("requested an empty vector")]
    EmptyVector,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported law: {0}")]
    UnsupportedLaw(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("model not identifiable: {0}")]
    NotIdentifiable(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("experiment aborted: {0}")]
    ExperimentAborted(String),

    #[error("no exceedances at any threshold; widen the r grid or add replicates")]
    WidenGrid,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for outcomes that are statistical flags rather than failures
    /// (non-identifiable models, degenerate spectra or data).
    pub fn is_statistical_flag(&self) -> bool {
        matches!(
            self,
            Error::NotIdentifiable(_)
                | Error::DegenerateSpectrum(_)
                | Error::Singular(_)
                | Error::DegenerateData(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
