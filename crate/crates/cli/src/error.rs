use facehop_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),
    /// Missing, unreadable or malformed input.
    #[error("{0}")]
    Data(String),
    /// Fitting or training failed.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidInput(_) | CoreError::DimensionMismatch { .. } => Self::Usage(msg),
            CoreError::Fit(_) | CoreError::Training(_) => Self::Numeric(msg),
            CoreError::Parse { .. }
            | CoreError::MissingImages(_)
            | CoreError::Version { .. }
            | CoreError::Checksum { .. }
            | CoreError::Corrupt(_)
            | CoreError::Oracle(_)
            | CoreError::Image(_)
            | CoreError::Io(_)
            | CoreError::Json(_) => Self::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attach what was being done to an error.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| match e.into() {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", what())),
            CliError::Data(m) => CliError::Data(format!("{}: {m}", what())),
            CliError::Numeric(m) => CliError::Numeric(format!("{}: {m}", what())),
        })
    }
}
