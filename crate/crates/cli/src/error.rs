use thiserror::Error;

/// Exit status contract: 0 success, 1 domain error, 2 usage error.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl From<lossatlas_core::Error> for CliError {
    fn from(e: lossatlas_core::Error) -> Self {
        match e {
            lossatlas_core::Error::Manifest(_) => CliError::Usage(e.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<lossatlas_service::StoreError> for CliError {
    fn from(e: lossatlas_service::StoreError) -> Self {
        match e {
            lossatlas_service::StoreError::Core(inner) => inner.into(),
            other => CliError::Domain(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
