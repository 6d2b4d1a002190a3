use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not Hermitian (max deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error(
        "Fock truncation leak: population {population:e} in the top two levels \
         of a {fock_dim}-level oscillator"
    )]
    TruncationLeak { population: f64, fock_dim: usize },

    #[error("integrator failed at t = {time:e}: {reason}")]
    Integration { time: f64, reason: String },

    #[error("fit did not converge: {0}")]
    FitNonConvergence(String),

    #[error("peaks are not resolvable: {0}")]
    Unresolvable(String),
}

impl Error {
    /// True for errors raised by a physical-validity guard (as opposed to bad
    /// input or a failed fit).
    pub fn is_physics_guard(&self) -> bool {
        matches!(self, Error::TruncationLeak { .. } | Error::Integration { .. } | Error::InvalidState(_))
    }

    pub fn is_fit_failure(&self) -> bool {
        matches!(self, Error::FitNonConvergence(_) | Error::Unresolvable(_))
    }
}
