use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DcaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DcaError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate batch: batch norm in train mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("mining error: {0}")]
    Mining(String),

    #[error("optimizer error: non-finite gradient for parameter `{param}`")]
    Optimizer { param: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("split error: class `{class}` {reason}")]
    Split { class: String, reason: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted at step {step}: loss `{loss}` is not finite")]
    NonFiniteLoss { step: u64, loss: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DcaError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DcaError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DcaError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, files, CLI
    /// arguments, missing input files) as opposed to failures while
    /// running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            DcaError::Config(_)
                | DcaError::Parse { .. }
                | DcaError::Integrity(_)
                | DcaError::Split { .. }
                | DcaError::Sampling(_)
        ) || matches!(self, DcaError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
