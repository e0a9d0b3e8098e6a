//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by surface construction, operator assembly, solvers and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// A user-supplied value is outside its documented range.
    #[error("invalid value for `{field}`: {reason}")]
    InvalidInput { field: String, reason: String },

    /// The radial function is not strictly positive at some grid node.
    #[error("surface is not star-shaped: rho = {rho:e} at node {node}")]
    StarShapeViolation { node: usize, rho: f64 },

    /// A requested harmonic degree exceeds what the quadrature grid resolves.
    #[error("resolution error: degree {requested} requested but the grid resolves only {available}")]
    Resolution { requested: usize, available: usize },

    /// An operator or field of the wrong kind was passed.
    #[error("kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    /// Evaluation point too close to the surface for the product quadrature.
    #[error(
        "point at distance {distance:.3e} from the surface is inside the quadrature guard {guard:.3e} \
         (estimated relative error {estimated_error:.1e})"
    )]
    NearBoundary {
        distance: f64,
        guard: f64,
        estimated_error: f64,
    },

    /// A Gram matrix that should be positive definite is not.
    #[error("Gram matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// The linear system is singular because the material parameters hit an eigenvalue.
    #[error("system is at resonance: spectral parameter {parameter} coincides with eigenvalue {eigenvalue}")]
    Resonance { parameter: f64, eigenvalue: f64 },

    /// A matrix inverse was requested for an operator that is too ill-conditioned.
    #[error("matrix too ill-conditioned for inversion (condition estimate {condition:.2e})")]
    IllConditioned { condition: f64 },

    /// A numerical tolerance was breached.
    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input rather than by numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput { .. }
                | Error::KindMismatch { .. }
                | Error::Json(_)
                | Error::StarShapeViolation { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
