use thiserror::Error;

/// Errors produced by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("fields live on different bases")]
    BasisMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("stationary solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("controllability Gramian is ill-conditioned (condition {condition:.3e})")]
    IllConditionedGramian { condition: f64 },

    #[error("Riccati solver failed: {reason}")]
    Riccati { reason: String, log: Vec<f64> },

    #[error("singular Lyapunov equation (eigenvalue sum {0:.3e})")]
    SingularLyapunov(f64),

    #[error("closed loop is not stable (margin {0:.3e})")]
    Unstable(f64),

    #[error("blow-up at t = {t:.4}: norm {norm:.3e} exceeds {limit:.3e}")]
    BlowUp { t: f64, norm: f64, limit: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Validation failures (including unreadable inputs) map to exit code 2,
    /// numerical failures to 3.
    pub fn is_validation(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::LengthMismatch { .. }
                | Error::BasisMismatch
                | Error::InvalidParameter(_)
                | Error::Format(_)
                | Error::Io(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

/// Attaches a stage name to errors.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
