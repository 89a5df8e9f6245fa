use nsvt_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_TOLERANCE: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("tolerance breach: {0}")]
    Tolerance(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Tolerance(_) => EXIT_TOLERANCE,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Usage(_) | Error::Json(_) | Error::Geometry(_) => EXIT_CONFIG,
                Error::Io(_) | Error::Format { .. } => EXIT_IO,
                Error::Numeric { .. } | Error::DegenerateColumn { .. } | Error::Diverged { .. } | Error::Dimension { .. } => EXIT_NUMERIC,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
