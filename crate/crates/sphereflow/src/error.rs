use thiserror::Error;

/// Everything that can go wrong inside the library.
///
/// Variants are grouped so a front end can map them onto distinct exit
/// statuses: [`Error::is_numerical`] separates numerical breakdowns from
/// malformed input.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate step: |x + h v| = {norm:e} below 1e-14")]
    DegenerateStep { norm: f64 },

    #[error("step {step}, particle {particle}: {message}")]
    Integration {
        step: usize,
        particle: usize,
        message: String,
    },

    #[error("pairing clock factor exp({exponent:.3}) exceeds the cap exp(700) at step {step}")]
    ClockOverflow { step: usize, exponent: f64 },

    #[error("Schur iteration did not converge after {sweeps} sweeps (subdiagonal residual {residual:e})")]
    SchurNoConvergence { sweeps: usize, residual: f64 },

    #[error("quadrature did not converge: relative change {change:e} at level {level}")]
    QuadratureNoConvergence { level: usize, change: f64 },

    #[error("backward evolution by t = {t} reaches the collapse of mixture component #{} at T_min = {t_min}", component + 1)]
    MixtureCollapse {
        component: usize,
        t: f64,
        t_min: f64,
    },

    #[error("mixture has a dirac component (#{}); {what}", component + 1)]
    DiracComponent { component: usize, what: String },

    #[error("degenerate centroid for cluster {cluster} (|mean| = {norm:e})")]
    DegenerateCentroid { cluster: usize, norm: f64 },

    #[error("|K^T Q x| = {norm:e} is below 1e-12; Q and K must be invertible")]
    SingularQueryKey { norm: f64 },

    #[error("unknown identifier: {0}")]
    Unknown(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::InvalidInput(_) | Error::DimensionMismatch { .. } | Error::Unknown(_) => false,
            Error::Context { source, .. } => source.is_numerical(),
            _ => true,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
