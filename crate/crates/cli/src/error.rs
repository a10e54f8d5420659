use posegraph_slam::eval::EvalError;
use posegraph_slam::graph::GraphError;
use posegraph_slam::io::IoError;
use posegraph_slam::loops::LoopError;
use posegraph_slam::optimizer::OptimizeError;
use posegraph_slam::sim::SimError;
use posegraph_slam::window::WindowError;
use thiserror::Error;

/// Process exit status of every command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Data(String),
    #[error("optimizer failed: {message}")]
    Numerical { message: String },
}

impl CliError {
    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Usage(_) => ExitStatus::Usage,
            CliError::Config(_) | CliError::Io(_) | CliError::Data(_) => ExitStatus::Data,
            CliError::Numerical { .. } => ExitStatus::Numerical,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(EvalError, GraphError, LoopError, SimError, WindowError);

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::NumericalFailure { .. } => CliError::Numerical { message: e.to_string() },
            OptimizeError::InvalidConfig(m) => CliError::Config(m),
            OptimizeError::Graph(g) => CliError::Data(g.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use posegraph_slam::optimizer::{OptReport, TerminationReason};

    #[test]
    fn numerical_failures_map_to_their_own_status() {
        let report = OptReport {
            iterations: 0,
            initial_chi2: 1.0,
            final_chi2: 1.0,
            chi2_trace: vec![1.0],
            attempts: Vec::new(),
            termination: TerminationReason::NumericalFailure,
        };
        let e: CliError = OptimizeError::NumericalFailure { lambda: 1e17, report: Box::new(report) }.into();
        assert_eq!(e.status(), ExitStatus::Numerical);
        assert_eq!(CliError::from(GraphError::NoFixedNode).status(), ExitStatus::Data);
        assert_eq!(CliError::Config("x".into()).status(), ExitStatus::Data);
        assert_eq!(CliError::Usage("x".into()).status(), ExitStatus::Usage);
    }
}
