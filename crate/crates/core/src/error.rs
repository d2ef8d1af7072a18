use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{op} did not converge after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence {
        op: &'static str,
        sweeps: usize,
        residual: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite loss at step {step} (lr {lr:e}, max |grad| {max_grad:e})")]
    NonFiniteLoss { step: usize, lr: f64, max_grad: f64 },

    #[error("checkpoint parse error at byte {offset}: {reason}")]
    Checkpoint { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension { op, lhs, rhs }
    }
}
