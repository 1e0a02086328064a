use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] semhash::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(semhash::Error::Io(e))
    }
}

impl CliError {
    /// 1 usage/config, 2 data or format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use semhash::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) => 1,
                E::NonFiniteLoss { .. } | E::ZeroNorm { .. } | E::Numerical(_) => 3,
                E::Io(_)
                | E::BadMagic { .. }
                | E::BadVersion { .. }
                | E::Truncated { .. }
                | E::Format(_)
                | E::InvalidData(_)
                | E::Shape(_)
                | E::TooFewConcepts { .. } => 2,
            },
        }
    }
}
