use std::fmt;

/// CLI failures, partitioned by exit code so scripts can react precisely.
#[derive(Debug)]
pub enum CliError {
    /// The configuration is missing, unparseable, or out of range (exit 1).
    Config(String),
    /// A required input artifact or file does not exist (exit 2).
    MissingArtifact(String),
    /// An artifact on disk no longer matches the hash recorded when it was
    /// built — something changed behind the pipeline's back (exit 3).
    HashMismatch(String),
    /// A stage failed while computing (exit 4).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::MissingArtifact(_) => 2,
            CliError::HashMismatch(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::MissingArtifact(m) => write!(f, "missing artifact: {m}"),
            CliError::HashMismatch(m) => write!(f, "hash mismatch: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Shorthand for wrapping a stage failure with context.
pub fn runtime(context: &str, err: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {err}"))
}
