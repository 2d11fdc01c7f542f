use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite forward state at path {path}, step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("resolvent did not converge after {iterations} iterations (bracket width {width:e})")]
    ResolventNoConvergence { iterations: usize, width: f64 },

    #[error(
        "fixed point did not converge after {iterations} iterations (last residual {residual:e})"
    )]
    FixedPointNoConvergence { iterations: usize, residual: f64 },

    #[error(
        "regression underdetermined: {samples} samples for {features} features \
         (Gram condition number {condition:e})"
    )]
    Underdetermined {
        samples: usize,
        features: usize,
        condition: f64,
    },

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("backward step {step} failed: {source}")]
    BackwardStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::BackwardStep {
            step,
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
