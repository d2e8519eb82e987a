//! Monte Carlo Bismut-type estimators for the reflected (Neumann) semigroup
//! `P_t = e^{tL/2}`, `L = Δ + Z`, on manifolds with boundary, with deterministic
//! oracles, functional-inequality bound checks and Stein-kernel diagnostics.

pub mod bounds;
pub mod estimators;
pub mod geometry;
pub mod linalg;
pub mod oracle;
pub mod pathsim;
pub mod runner;
pub mod stein;
pub mod transport;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("assertion failed: {0}")]
    Assertion(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 1 configuration, 2 assertion, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) => 1,
            Error::Assertion(_) | Error::Geometry(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
