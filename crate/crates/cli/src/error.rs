use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ss3d_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 configuration, 3 divergence, 4 I/O or corrupt file, 5 shape or
    /// compatibility, 6 pipeline precondition.
    pub fn exit_code(&self) -> u8 {
        use ss3d_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::NonFinite(_) => 3,
                E::Io(_) | E::Format(_) | E::UnsupportedDtype(_) | E::Digest | E::Version { .. } | E::Json(_) => 4,
                E::Shape(_) => 5,
                E::Precondition(_) | E::Undefined(_) => 6,
                E::NonScalarLoss(_) | E::StaleGraph => 1,
            },
        }
    }
}
