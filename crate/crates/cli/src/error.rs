use std::path::Path;

use cpodrift::counterfactual::CounterfactualError;
use cpodrift::cpo::CpoError;
use cpodrift::drift::DriftError;
use cpodrift::graph::GraphError;
use cpodrift::policy::PolicyError;
use cpodrift::robustness::RobustnessError;
use cpodrift::study::StudyError;
use cpodrift::supervised::SupervisedError;
use cpodrift::trace::TraceError;
use cpodrift::world::WorldError;

/// Failure classes, each with its own process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or flag combinations.
    #[error("usage: {0}")]
    Usage(String),
    /// Inputs that parse but break an invariant, or that fail to parse.
    #[error("invalid input: {0}")]
    Validation(String),
    /// Anything that is our fault or the environment's: unwritable output
    /// directory, serialization failures.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    pub fn read(path: &Path, err: std::io::Error) -> Self {
        CliError::Validation(format!("cannot read {}: {err}", path.display()))
    }

    pub fn write(path: &Path, err: std::io::Error) -> Self {
        CliError::Internal(format!("cannot write {}: {err}", path.display()))
    }

    pub fn in_file(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Validation(format!("{}: {err}", path.display()))
    }
}

macro_rules! validation_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(err: $ty) -> Self {
                CliError::Validation(err.to_string())
            }
        })*
    };
}

validation_from!(
    CounterfactualError,
    CpoError,
    DriftError,
    GraphError,
    PolicyError,
    RobustnessError,
    StudyError,
    SupervisedError,
    TraceError,
    WorldError
);
