use std::fmt;
use std::process::ExitCode;

use xpert_core::adaptation::AdaptationError;
use xpert_core::consolidation::ConsolidationError;
use xpert_core::init::InitError;
use xpert_core::moe::MoeError;
use xpert_core::probe::ProbeError;
use xpert_core::selection::SelectionError;
use xpert_core::TensorError;

/// Failure of one command, tagged with its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid input files, inconsistent requests: exit 2.
    Usage(String),
    /// Anything else: exit 1.
    Internal(String),
}

impl CliError {
    pub fn usage(e: impl fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn internal(e: impl fmt::Display) -> Self {
        CliError::Internal(e.to_string())
    }

    /// Tags an error from reading `path` as a usage failure.
    pub fn input(path: &std::path::Path) -> impl FnOnce(String) -> Self + '_ {
        move |msg| CliError::Usage(format!("{}: {msg}", path.display()))
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Internal(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        CliError::usage(e)
    }
}

impl From<MoeError> for CliError {
    fn from(e: MoeError) -> Self {
        match e {
            MoeError::Io(_) => CliError::internal(e),
            _ => CliError::usage(e),
        }
    }
}

impl From<ConsolidationError> for CliError {
    fn from(e: ConsolidationError) -> Self {
        match e {
            ConsolidationError::Tensor(_) | ConsolidationError::Io(_) => CliError::internal(e),
            _ => CliError::usage(e),
        }
    }
}

impl From<AdaptationError> for CliError {
    fn from(e: AdaptationError) -> Self {
        match e {
            AdaptationError::Tensor(TensorError::RankOutOfRange { .. }) => CliError::usage(e),
            AdaptationError::Tensor(_) | AdaptationError::Checkpoint(_) => CliError::internal(e),
            _ => CliError::usage(e),
        }
    }
}

impl From<InitError> for CliError {
    fn from(e: InitError) -> Self {
        match e {
            InitError::Adaptation(a) => a.into(),
            InitError::Consolidation(c) => c.into(),
            InitError::Checkpoint(_) | InitError::InvalidModel(_) => CliError::internal(e),
            _ => CliError::usage(e),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::InvalidConfig(_) | ProbeError::Json(_) => CliError::usage(e),
            _ => CliError::internal(e),
        }
    }
}
