use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("rank deficient: |R_ii| = {pivot:e} below tolerance {tol:e}")]
    RankDeficient { pivot: f64, tol: f64 },
    #[error("series did not converge after {terms} terms (step norm too large, reduce the learning rate)")]
    NonConvergence { terms: usize },
    #[error("non-finite entry encountered in {0}")]
    NonFinite(&'static str),
    #[error("columns not orthonormal: max |YᵀY - I| = {drift:e} exceeds {tol:e}")]
    NotOrthonormal { drift: f64, tol: f64 },
    #[error("not a tangent vector: max |YᵀΔ + ΔᵀY| = {residual:e} exceeds {tol:e}")]
    NotTangent { residual: f64, tol: f64 },
    #[error("tangent vectors are attached to different base points")]
    BasePointMismatch,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(
    op: &'static str,
    expected: impl std::fmt::Display,
    got: impl std::fmt::Display,
) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
