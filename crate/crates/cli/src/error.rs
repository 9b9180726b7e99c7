//! Process-level error classification: usage problems exit 2, numerical
//! failures exit 3, I/O failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

macro_rules! numeric_from {
    ($($ty:ty),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Numeric(e.to_string())
            }
        })*
    };
}

numeric_from!(
    freqdiff_core::spectral::SpectralError,
    freqdiff_core::sde::SdeError,
    freqdiff_core::scorenet::ScoreNetError,
    freqdiff_core::cache::CacheError,
    freqdiff_core::sampler::SamplerError,
    freqdiff_core::train::TrainError,
    freqdiff_core::eval::EvalError,
);

impl From<freqdiff_core::checkpoint::CheckpointError> for CliError {
    fn from(e: freqdiff_core::checkpoint::CheckpointError) -> Self {
        match e {
            freqdiff_core::checkpoint::CheckpointError::Io(inner) => CliError::Io(inner.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}
