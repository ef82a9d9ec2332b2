use std::fmt;

/// Failure of a subcommand; each variant maps to a stable exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or command-line usage.
    Config(String),
    Training(String),
    /// A checked property did not hold.
    Violation(String),
    Io(String),
    Core(purilab::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Training(_) => 3,
            CliError::Violation(_) => 4,
            CliError::Io(_) => 1,
            CliError::Core(e) => match e {
                purilab::Error::Training { .. } => 3,
                purilab::Error::Domain(_)
                | purilab::Error::Unsupported(_)
                | purilab::Error::Parse(_) => 2,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Training(m) => write!(f, "training failed: {m}"),
            CliError::Violation(m) => write!(f, "property violation: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<purilab::Error> for CliError {
    fn from(e: purilab::Error) -> Self {
        match e {
            purilab::Error::Training { .. } => CliError::Training(e.to_string()),
            other => CliError::Core(other),
        }
    }
}
