use std::fmt;

use vcm_core::analyzer::AnalyzerError;
use vcm_core::container::ContainerError;
use vcm_core::evaluation::EvalError;
use vcm_core::harness::HarnessError;
use vcm_core::training::TrainError;
use vcm_core::video::VideoError;

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files (exit 2).
    Usage(String),
    /// Divergence guard tripped (exit 3).
    Diverged(String),
    /// External encoder or decoder missing (exit 4).
    MissingTool(String),
    /// Any other runtime failure (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::MissingTool(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Diverged(m) | CliError::MissingTool(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::MissingTool { .. } => CliError::MissingTool(e.to_string()),
            HarnessError::Job { source, qp } if matches!(*source, HarnessError::MissingTool { .. }) => {
                CliError::MissingTool(format!("qp {qp}: {source}"))
            }
            HarnessError::Template { .. } | HarnessError::InvalidJob(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Harness(h) => h.into(),
            EvalError::Parse { .. } | EvalError::TooFewPoints(_) | EvalError::BadRate(_) | EvalError::DuplicateRate(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Config(_) | TrainError::AnalyzerNotFrozen | TrainError::EmptyDataset => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<AnalyzerError> for CliError {
    fn from(e: AnalyzerError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<VideoError> for CliError {
    fn from(e: VideoError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Runtime(e.to_string())
    }
}
