use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Core(ragfuse::Error),
    Usage(String),
    /// The output directory holds a run that must not be overwritten.
    Exists(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Exists(_) => "exists",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::Exists(m) => f.write_str(m),
        }
    }
}

impl From<ragfuse::Error> for CliError {
    fn from(e: ragfuse::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}
