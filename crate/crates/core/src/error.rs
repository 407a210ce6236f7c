use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid sampling design: {0}")]
    InvalidDesign(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("structure not applicable: {0}")]
    StructureNotApplicable(String),

    #[error("no positively weighted events; survival estimate is degenerate")]
    DegenerateSurvival,

    #[error("singular system: {0}")]
    RankDeficient(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no convergence after {iterations} iterations (last delta {last_delta:.3e})")]
    NonConvergence {
        iterations: usize,
        last_delta: f64,
        trace: Vec<f64>,
        last: Vec<f64>,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } => 2,
            Error::RankDeficient(_)
            | Error::Numeric(_)
            | Error::DegenerateSurvival
            | Error::Calibration(_) => 3,
            _ => 1,
        }
    }
}
