use thiserror::Error;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("physics guard: {0}")]
    Physics(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Physics(_) => 3,
            Self::Fit(_) => 4,
            Self::Io(_) => 1,
        }
    }
}

impl From<atphonon::Error> for CliError {
    fn from(e: atphonon::Error) -> Self {
        if e.is_fit_failure() {
            Self::Fit(e.to_string())
        } else if matches!(e, atphonon::Error::InvalidArgument(_)) {
            Self::Config(e.to_string())
        } else {
            Self::Physics(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
