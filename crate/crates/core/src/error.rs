use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("query outside field coverage: {0}")]
    OutOfDomain(String),

    #[error("interpolation touches a masked cell at {0}")]
    MaskedRegion(String),

    #[error("low-resolution grid does not cover the target grid: {0}")]
    CoverageMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("field stacks are not on a common grid/time axis: {0}")]
    GridMismatch(String),

    #[error("insufficient data: {rows} rows available, {required} required")]
    InsufficientData { rows: usize, required: usize },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("harvest produced {got} operator samples, {required} required")]
    HarvestTooSmall { got: usize, required: usize },

    #[error("high-resolution node ({row}, {col}) is not covered by any tile")]
    UncoveredNode { row: usize, col: usize },

    #[error("empty observation set")]
    EmptyObservations,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-parseable code, used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "E_PARAM",
            Error::OutOfDomain(_) => "E_DOMAIN",
            Error::MaskedRegion(_) => "E_MASKED",
            Error::CoverageMismatch(_) => "E_COVERAGE",
            Error::DimensionMismatch { .. } => "E_DIM",
            Error::GridMismatch(_) => "E_GRID",
            Error::InsufficientData { .. } => "E_INSUFFICIENT",
            Error::SingularSystem(_) => "E_SINGULAR",
            Error::DegenerateInput(_) => "E_DEGENERATE",
            Error::HarvestTooSmall { .. } => "E_HARVEST",
            Error::UncoveredNode { .. } => "E_UNCOVERED",
            Error::EmptyObservations => "E_EMPTY_OBS",
            Error::Format(_) => "E_FORMAT",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Csv(_) => "E_CSV",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
