use std::fmt;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Core(otalign::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Core(otalign::Error::Parameter(_)) => 2,
            Self::Core(otalign::Error::Divergence { .. }) => 3,
            Self::Io(_) | Self::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Io(m) => write!(f, "i/o error: {m}"),
            Self::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<otalign::Error> for CliError {
    fn from(e: otalign::Error) -> Self {
        Self::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
