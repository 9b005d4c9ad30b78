use std::fmt;

/// Everything a command can fail with, bucketed by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] pawave::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        })
    }
}

impl CliError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CliError::Usage(_) => ErrorKind::Usage,
            CliError::Data(_) => ErrorKind::Data,
            CliError::Numeric(_) => ErrorKind::Numeric,
            CliError::Core(e) => match e {
                pawave::Error::Config(_) => ErrorKind::Usage,
                pawave::Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
                _ => ErrorKind::Data,
            },
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.kind().exit_code()
    }

    /// `error code=<n> kind=<kind> msg="<escaped message>"`, always one line.
    pub fn line(&self) -> String {
        error_line(self.kind(), &self.to_string())
    }
}

pub fn error_line(kind: ErrorKind, msg: &str) -> String {
    format!("error code={} kind={kind} msg={:?}", kind.exit_code(), msg)
}
