use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid matrix `{name}`: {reason}")]
    InvalidMatrix { name: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("innovation covariance is singular at node {node}, iteration {iteration}")]
    SingularInnovation { node: usize, iteration: usize },

    #[error(
        "Riccati recursion{} did not converge in {iterations} iterations (last delta {last_delta:.3e})",
        node.map(|k| format!(" for node {k}")).unwrap_or_default()
    )]
    RiccatiNonConvergence {
        node: Option<usize>,
        iterations: usize,
        last_delta: f64,
    },

    #[error("steady-state error recursion is unstable (spectral radius {rho:.6})")]
    Unstable { rho: f64 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dimension(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for numeric failures, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. } | Error::InvalidMatrix { .. } | Error::Config(_) => 2,
            Error::SingularInnovation { .. }
            | Error::RiccatiNonConvergence { .. }
            | Error::Unstable { .. }
            | Error::Numeric(_) => 3,
            Error::Io { .. } => 1,
        }
    }
}
