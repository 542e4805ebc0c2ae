use thiserror::Error;

/// Errors produced by kernel evaluation, structured linear algebra, gradient
/// computation and training.
#[derive(Debug, Error)]
pub enum GphmError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("derivative order {order} unsupported (maximum is 2)")]
    UnsupportedOrder { order: usize },

    #[error("operation unsupported for kernel kind {kind}")]
    UnsupportedKind { kind: String },

    #[error(
        "matrix for dimension {dim} not positive definite after jitter ladder {ladder:?} \
         (relative to mean diagonal {mean_diag:.3e})"
    )]
    NotPositiveDefinite {
        dim: usize,
        ladder: Vec<f64>,
        mean_diag: f64,
    },

    #[error("shape mismatch in dimension {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        dim: usize,
        expected: usize,
        got: usize,
    },

    #[error("quadrature range too small: estimated tail mass {tail:.3e} exceeds {limit:.3e}")]
    QuadratureRange { tail: f64, limit: f64 },

    #[error("non-finite value in gradient computation at operation `{op}`")]
    GradientNonFinite { op: String },

    #[error("objective diverged: {term} became non-finite")]
    ObjectiveNonFinite { term: String },

    #[error("training aborted at iteration {iteration}: non-finite gradient for `{param}`")]
    TrainingAbort { iteration: usize, param: String },

    #[error("unknown problem id `{0}`")]
    UnknownProblem(String),
}

pub type Result<T> = std::result::Result<T, GphmError>;
