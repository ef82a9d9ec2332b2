use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A non-finite value appeared during integration or evaluation.
    #[error("numerical error at t = {t}: {msg} (x = {x:?})")]
    Numerical { msg: String, x: Vec<f64>, t: f64 },

    /// An API was used out of order (e.g. a backward pass against a stale tape).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at iteration {iter} (last finite loss {last_finite_loss})")]
    Training { iter: usize, last_finite_loss: f64 },

    #[error("draw {index}: {source}")]
    Draw {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
