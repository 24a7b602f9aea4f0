use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Cubic constants that do not give a positive definite stiffness.
    #[error("inadmissible cubic constants: {0}")]
    Inadmissible(String),

    #[error("singular interface system for normal {normal:?} (condition number {cond:.3e})")]
    SingularInterface { normal: [f64; 3], cond: f64 },

    #[error("tree node (level {level}, position {position}): {source}")]
    AtNode {
        level: usize,
        position: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    /// Iterative solver gave up; carries the last residuals seen.
    #[error("{what} did not converge after {iterations} iterations (last residual {last:.3e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    /// Online step still failing after the allowed number of halvings.
    #[error("online step ending at t = {time:.6e} failed after {halvings} halvings (worst interface residual {:.3e})", node_residuals.iter().cloned().fold(f64::NAN, f64::max))]
    StepFailed {
        time: f64,
        halvings: usize,
        /// Relative traction mismatch per tree node at the last iterate.
        node_residuals: Vec<f64>,
    },

    #[error("training diverged at epoch {epoch}: loss {loss:.4e} exceeds 10x initial {initial:.4e}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    #[error("non-finite gradient in batch {batch} of epoch {epoch}")]
    NonFiniteGradient { epoch: usize, batch: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unsupported {what} schema version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn at_node(self, level: usize, position: usize) -> Self {
        Error::AtNode {
            level,
            position,
            source: Box::new(self),
        }
    }

    /// True for failures of a numerical procedure as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularInterface { .. }
            | Error::NotConverged { .. }
            | Error::StepFailed { .. }
            | Error::Diverged { .. }
            | Error::NonFiniteGradient { .. } => true,
            Error::AtNode { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
