use fprior::promptloop::LoopFailure;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] fprior::Error),

    #[error("{0}")]
    Loop(Box<LoopFailure>),
}

impl CliError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        use fprior::Error as E;
        let core = match self {
            CliError::Config(_) => return 2,
            CliError::Data(_) => return 4,
            CliError::Io(_) => return 8,
            CliError::Core(e) => e,
            CliError::Loop(f) => &f.source,
        };
        match core {
            E::Config(_) => 2,
            E::Generator { .. } => 3,
            E::Provenance { .. } | E::Shape(_) | E::EmptyData => 4,
            E::UnsupportedPair { .. } => 5,
            E::NonConvergence { .. } | E::Singular(_) | E::Degenerate(_) | E::NonFinite(_) => 6,
        }
    }

    pub fn diagnostics(&self) -> Option<&str> {
        let core = match self {
            CliError::Core(e) => e,
            CliError::Loop(f) => &f.source,
            _ => return None,
        };
        match core {
            fprior::Error::Generator { diagnostics, .. } if !diagnostics.is_empty() => Some(diagnostics),
            _ => None,
        }
    }
}

impl From<LoopFailure> for CliError {
    fn from(f: LoopFailure) -> Self {
        CliError::Loop(Box::new(f))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
