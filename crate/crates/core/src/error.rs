use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("degenerate assignment column {column}: total mass {mass:e}")]
    DegenerateColumn { column: usize, mass: f64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("malformed file at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
