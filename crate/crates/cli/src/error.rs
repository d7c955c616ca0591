use thiserror::Error;

use step_core::cost::CostError;
use step_core::encoder::ModelError;
use step_core::merge::MergeError;
use step_core::metrics::MetricsError;
use step_core::pipeline::PipelineError;
use step_core::pixel_io::PixelError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("input: {0}")]
    Input(String),
    #[error("internal: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<PixelError> for CliError {
    fn from(e: PixelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::InvalidThreshold { .. } | MergeError::InvalidSharpness(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Override(_) => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<CostError> for CliError {
    fn from(e: CostError) -> Self {
        match e {
            CostError::Model(m) => m.into(),
            CostError::EmptyCorpus => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Grid(_) | PipelineError::Supertoken(_) => CliError::Input(e.to_string()),
            PipelineError::Merge(m) => m.into(),
            PipelineError::Model(m) => m.into(),
            PipelineError::Cost(c) => c.into(),
            PipelineError::Invariant(_) => CliError::Internal(e.to_string()),
        }
    }
}
