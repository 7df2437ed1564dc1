use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Range(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid series: {0}")]
    Series(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("csv row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error("not enough eligible windows: requested {requested}, population {population}")]
    Population { requested: usize, population: usize },

    #[error("numeric failure at {location}: {message}")]
    Numeric { location: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numeric(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            message: message.into(),
        }
    }
}
