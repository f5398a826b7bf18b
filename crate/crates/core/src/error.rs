use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entry in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Configuration problem; `field` is a dotted path into the config file.
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("time {s} outside horizon [{t0}, {t1}]")]
    OutOfHorizon { s: f64, t0: f64, t1: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Σ_ε or Σ̄_ε dropped below the ε/2 margin while integrating the perturbed Riccati system.
    #[error(
        "riccati: convexity lost at eps = {epsilon}, s = {time}: min eigenvalue of {which} is {min_eig}"
    )]
    ConvexityLoss {
        epsilon: f64,
        time: f64,
        which: &'static str,
        min_eig: f64,
    },

    #[error("riccati: blow-up at eps = {epsilon}, s = {time} (Frobenius norm {norm:.3e})")]
    BlowUp { epsilon: f64, time: f64, norm: f64 },

    #[error("feedback: {which} is singular at s = {time}")]
    Singular { which: &'static str, time: f64 },

    #[error("feedback: unperturbed Riccati solution is not regular ({failures} failures)")]
    NotRegular { failures: usize },

    #[error("simulate: non-finite state at s = {time} on path {path}")]
    NonFiniteState { time: f64, path: usize },

    #[error("pipeline: gains are not Cauchy on [{t_lo}, {t_hi}]: {detail}")]
    NotCauchy {
        t_lo: f64,
        t_hi: f64,
        detail: String,
    },

    #[error("pipeline: {0}")]
    Precondition(String),
}
