use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("dimension {requested} exceeds the configured maximum {max} (set RHO_LAB_MAX_DIM to raise it)")]
    DimensionLimit { requested: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),

    #[error("vector is not normalized (norm {0})")]
    NotNormalized(f64),

    #[error("invalid density matrix: {0}")]
    InvalidDensity(String),

    #[error("invalid probabilities: {0}")]
    InvalidProbabilities(String),

    #[error("Bloch vector has length {0} > 1")]
    NonPhysicalBloch(f64),

    #[error("basis is not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),

    #[error("invalid apparatus: {0}")]
    InvalidApparatus(String),

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("invalid POVM: {0}")]
    InvalidPovm(String),

    #[error("affine form is constant (|a| = {0:e}); extremal polarizations are undefined")]
    ConstantForm(f64),

    #[error("outcome probability is not affine over the Bloch ball (residual {0:e})")]
    NotAffine(f64),

    #[error("affine form violates probability bounds: {0}")]
    ProbabilityBounds(String),

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("apparatus does not deterministically select the first branch for psi1 (P = {0})")]
    BornPrecondition(f64),
}
