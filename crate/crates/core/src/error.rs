//! Error type shared by all solver modules.

use thiserror::Error;

/// Errors produced by solvers, validators and experiment drivers.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix has non-finite entries: {0}")]
    NonFinite(String),

    #[error("matrix not symmetric: max asymmetry {asymmetry:e} exceeds tolerance {tol:e}")]
    NotSymmetric { asymmetry: f64, tol: f64 },

    #[error("matrix not positive semidefinite in {context}: min eigenvalue {min_eig:e}")]
    NotPositiveSemidefinite { context: String, min_eig: f64 },

    #[error("Lyapunov operator is singular (zero eigenvalue of the vectorized system)")]
    SingularOperator,

    #[error("epsilon {0} outside (0, 1]")]
    EpsilonOutOfRange(f64),

    #[error("fast drift block is numerically singular (condition estimate {0:.3e})")]
    SingularA22(f64),

    #[error("control-weight matrix lost positivity{}: min eigenvalue {min_eig:e}",
            time.map(|t| format!(" at time {t:.6}")).unwrap_or_default())]
    DeltaNotPositive { time: Option<f64>, min_eig: f64 },

    #[error("step size underflow at time {time:.6} (required step below {limit:e})")]
    StepSizeUnderflow { time: f64, limit: f64 },

    #[error("algebraic Riccati iteration found no stabilizing solution: {0}")]
    NoStabilizingSolution(String),

    #[error("closed-loop fast matrix is numerically singular (condition estimate {0:.3e})")]
    SingularClosedLoop(f64),

    #[error("iteration did not converge within the allowed count (last gap {last_gap:e})")]
    MaxItersExceeded { last_gap: f64 },

    #[error("decay rate undefined: trajectory has no measurable displacement")]
    ZeroDisplacement,

    #[error("trajectory tail is not decaying (log-norm slope {slope:e} >= 0)")]
    NonDecaying { slope: f64 },

    #[error("boundary-layer trajectory diverged at tau {tau:.4} (norm {norm:.3e})")]
    Divergence { tau: f64, norm: f64 },

    #[error("errors below the noise floor leave fewer than 3 points for the order fit")]
    NoiseFloor,

    #[error("simulation step {step:e} exceeds eps/10 = {limit:e}")]
    StepTooLarge { step: f64, limit: f64 },

    #[error("all Monte Carlo paths exploded")]
    AllPathsExploded,

    #[error("solver failed at epsilon {epsilon}: {source}")]
    AtEpsilon {
        epsilon: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("problem file error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Tag an error with the epsilon of the sweep run that produced it.
    pub fn at_epsilon(self, epsilon: f64) -> Self {
        Error::AtEpsilon {
            epsilon,
            source: Box::new(self),
        }
    }
}
