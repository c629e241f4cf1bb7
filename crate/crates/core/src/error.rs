use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model '{model}': {function} is not finite at (x={x}, y={y})")]
    ModelEvaluation {
        model: String,
        function: &'static str,
        x: f64,
        y: f64,
    },

    #[error("expression error: {0}")]
    Expression(String),

    #[error(
        "fast-state window [{lo}, {hi}] truncates the invariant density at x={x}: \
         boundary/peak ratio {ratio:e} exceeds {limit:e}; widen the window"
    )]
    Truncation {
        x: f64,
        lo: f64,
        hi: f64,
        ratio: f64,
        limit: f64,
    },

    #[error("homogenization row at x={x} failed: {reason}")]
    Homogenization { x: f64, reason: String },

    #[error("limit trajectory left the x-grid hull [{lo}, {hi}] at t={time} (value {value})")]
    DomainEscape {
        time: f64,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("time step dt={dt} violates the stability rule dt <= eta/20 = {limit} (eta={eta})")]
    Stability { dt: f64, eta: f64, limit: f64 },

    #[error("path {path} blew up at step {step}")]
    BlowUp { path: usize, step: usize },

    #[error("tangent for channel W{channel} at r-index {r_index} blew up at step {step}")]
    TangentBlowUp {
        channel: usize,
        r_index: usize,
        step: usize,
    },

    #[error("Z-process overflow at step {step} (r-index {r_index})")]
    Overflow { r_index: usize, step: usize },

    #[error("time {t} is not on the grid (nearest node {nearest}, tolerance {tolerance})")]
    Alignment {
        t: f64,
        nearest: f64,
        tolerance: f64,
    },

    #[error("Q1+Q2 reconstruction residual {residual:e} at step {step} exceeds tolerance")]
    Decomposition { residual: f64, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
