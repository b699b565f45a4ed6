use thiserror::Error;

/// Errors produced by the integrators, oracles and the ensemble harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A run configuration is invalid (bad parameters, step size too large, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A fixed-point solve did not reach its residual target.
    #[error("fixed-point iteration did not converge after {sweeps} sweeps (residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    /// The Algorithm B midpoint ½(Uⁿ⁺¹+Uⁿ⁻¹) collapsed below the regularization level.
    #[error("degenerate midpoint |½(U⁺+U⁻)| = {norm:e} (time step too large for the current speed)")]
    DegenerateMidpoint { norm: f64 },

    /// The linear system of a Cayley step was singular.
    #[error("singular Cayley step")]
    SingularStep,

    /// The generator spectrum contradicts boundedness of the moment flow.
    #[error("spectral anomaly: eigenvalue {re:+e}{im:+e}i")]
    SpectralAnomaly { re: f64, im: f64 },

    /// ‖e^{Gt}‖ grew across the probe times.
    #[error("moment flow is not bounded: norm ratio {ratio:e} across probe times")]
    UnboundedFlow { ratio: f64 },

    #[error("not implemented: {0}")]
    NotImplemented(String),

    /// A tangent vector projected to zero in the bundle partition.
    #[error("degenerate projection of the tangent vector onto the reference plane")]
    DegenerateProjection,

    #[error("step {step}: {source}")]
    Step { step: usize, source: Box<Error> },

    #[error("path {path}, step {step}: {source}")]
    Path { path: usize, step: usize, source: Box<Error> },

    #[error("requested output `{0}` was not recorded")]
    AbsentOutput(String),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonConvergence { .. }
            | Error::DegenerateMidpoint { .. }
            | Error::SingularStep
            | Error::SpectralAnomaly { .. }
            | Error::UnboundedFlow { .. }
            | Error::DegenerateProjection => true,
            Error::Step { source, .. } | Error::Path { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
