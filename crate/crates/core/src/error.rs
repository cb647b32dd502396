use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite {what} at atom {atom}")]
    NonFinite { what: &'static str, atom: usize },

    #[error("non-finite {0}")]
    NonFiniteValue(&'static str),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("density value {value} at atom {atom} lies outside [0, 1]")]
    DensityOutOfRange { atom: usize, value: f64 },

    #[error("atom counts differ ({left} vs {right}); enable general transport to compare them")]
    CountMismatch { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time grids differ")]
    GridMismatch,

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("simulation produced a non-finite state at step {step}, particle {particle}")]
    Simulation { step: usize, particle: usize },

    #[error("invalid stopping rule: {0}")]
    InvalidRule(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("query out of bounds: {0}")]
    OutOfBounds(String),

    #[error("value table format: {0}")]
    TableFormat(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
