use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid instance: {0}")]
    Instance(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("graph is not connected")]
    Disconnected,

    #[error("step sizes violate the preconditioner bounds on rows {rows:?}")]
    StepBounds { rows: Vec<usize> },

    #[error("empty sample batch")]
    EmptySamples,

    #[error("reference solver did not converge after {iters} iterations (KKT residual {residual:e})")]
    OracleDiverged { iters: usize, residual: f64 },

    #[error("{0}")]
    Degenerate(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { context, expected, got })
    }
}
