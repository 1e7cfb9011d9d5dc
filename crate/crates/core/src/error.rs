use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum KprError {
    #[error("parse error in {context} at line {line}, column {column}: {message}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive semi-definite: eigenvalue {min_eigenvalue:e} is below the allowed bound {bound:e}")]
    NotPsd { min_eigenvalue: f64, bound: f64 },

    #[error("kernel is singular even after jitter: {0}")]
    SingularKernel(String),

    #[error("linear system is numerically singular: {0}")]
    SingularSystem(String),

    #[error("coordinate descent did not converge after {sweeps} sweeps (last max change {max_change:e}, KKT residual {kkt:e})")]
    Convergence {
        sweeps: usize,
        max_change: f64,
        kkt: f64,
    },

    #[error("kernel perturbation calibration failed: {0}")]
    Calibration(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<KprError>,
    },

    #[error("replication (scenario {scenario}, r2 {r2}, perturbation {perturbation}, sparsity {}, replication {replication}): {source}", sparsity.map_or("-".to_string(), |s| s.to_string()))]
    Replication {
        scenario: String,
        r2: f64,
        perturbation: f64,
        sparsity: Option<usize>,
        replication: usize,
        #[source]
        source: Box<KprError>,
    },
}

impl KprError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KprError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, line: usize, column: usize, message: impl Into<String>) -> Self {
        KprError::Parse {
            context: context.into(),
            line,
            column,
            message: message.into(),
        }
    }

    /// Process exit code: 2 for input/usage problems, 1 for numerical or internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            KprError::Parse { .. } | KprError::Schema(_) | KprError::Domain(_) | KprError::Usage(_) => 2,
            KprError::Fold { source, .. } | KprError::Replication { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, KprError>;
