use std::fmt;

/// Failures mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<latentdyn::Error> for CliError {
    fn from(e: latentdyn::Error) -> Self {
        use latentdyn::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Construction(_) | E::InsufficientEnvironments { .. } | E::Shape { .. } => {
                CliError::Config(msg)
            }
            E::Io { .. } | E::Format { .. } => CliError::Io(msg),
            E::Numeric { .. } | E::Domain { .. } | E::Graph(_) | E::Spline(_) => CliError::Numeric(msg),
        }
    }
}
