use thiserror::Error;

/// Errors produced by mesh construction, assembly and the per-step solvers.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid user-facing configuration (dimensions, parameter ranges, initial data).
    #[error("configuration error: {0}")]
    Config(String),

    /// The ALE frame degenerated: non-positive Jacobian weight or loss of
    /// injectivity of the boundary reparametrization. Inside the scheme this
    /// maps to a cutoff trigger, never a crash; it is only an error when a
    /// caller requests a frame for an inadmissible displacement directly.
    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),

    /// Mismatched degree-of-freedom layouts between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A linear solve failed or did not reach the requested accuracy.
    #[error("solver failure{}: {msg}", step.map(|n| format!(" at step {n}")).unwrap_or_default())]
    Solver { msg: String, step: Option<usize> },

    /// Evaluation outside the valid range (e.g. interpolant time outside [0, T]).
    #[error("out of range: {0}")]
    Range(String),

    /// I/O while writing diagnostics or reports.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn solver(msg: impl Into<String>) -> Self {
        CoreError::Solver {
            msg: msg.into(),
            step: None,
        }
    }

    /// Attach the time-step index at which a solver failure occurred.
    pub fn at_step(self, n: usize) -> Self {
        match self {
            CoreError::Solver { msg, .. } => CoreError::Solver { msg, step: Some(n) },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
