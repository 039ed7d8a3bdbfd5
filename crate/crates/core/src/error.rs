use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step size underflow at t = {time} (dt = {dt:e}); the system is too stiff for the configured tolerances")]
    Stiffness { time: f64, dt: f64 },

    #[error("integration failed at t = {time}: {message}")]
    Integration { time: f64, message: String },

    #[error("event location failed inside [{lo}, {hi}]")]
    EventLocation { lo: f64, hi: f64 },

    #[error("integration failed for gamma = {gamma}: {source}")]
    Sweep {
        gamma: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("target not reachable within the horizon (best residual {best_residual:e})")]
    Reachability { best_residual: f64 },

    #[error("switching structure never reaches the target; retry with max_switches = {suggested_max_switches}")]
    Structure { suggested_max_switches: usize },

    #[error("adjoint blew up at t = {time}")]
    AdjointBlowUp { time: f64 },

    #[error("point is not an equilibrium (residual {residual:e})")]
    NotEquilibrium { residual: f64 },

    #[error("pair (A, B) is not controllable: rank {rank} < {dim}")]
    Controllability { rank: usize, dim: usize },

    #[error("matrix is not Hurwitz (spectral abscissa {abscissa})")]
    NotHurwitz { abscissa: f64 },

    #[error("transversality covector undefined: terminal state coincides with the ellipsoid center")]
    DegenerateTransversality,

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("config: {key}: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::ContractViolation(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
