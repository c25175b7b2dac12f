use std::fmt;
use std::process::ExitCode;

use textclust_core::{AggregationError, CorpusError, GatewayError, PipelineError};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, corpus or missing artifacts. Exit 2.
    Usage(String),
    /// The backend could not be reached or kept failing. Exit 3.
    Transport(String),
    /// Aggregation produced no class set of the requested size. Exit 4.
    Selection(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Transport(_) => 3,
            CliError::Selection(_) => 4,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Transport(m) | CliError::Selection(m) => f.write_str(m),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Transport { .. } | GatewayError::Request { .. } | GatewayError::Response(_) => {
                CliError::Transport(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<AggregationError> for CliError {
    fn from(e: AggregationError) -> Self {
        match e {
            AggregationError::Gateway(g) => g.into(),
            AggregationError::SelectionFailed { .. }
            | AggregationError::EmptyHistogram
            | AggregationError::EmptyInput => CliError::Selection(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Stage1Aborted { .. } => CliError::Transport(e.to_string()),
            PipelineError::Aggregation(a) => a.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}
