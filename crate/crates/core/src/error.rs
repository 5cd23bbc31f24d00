use thiserror::Error;

/// Errors raised by the estimation toolkit.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("matrix is not Hermitian (max deviation {0:.3e})")]
    NotHermitian(f64),

    #[error("matrix is not unitary (‖U†U − 1‖ = {0:.3e})")]
    NotUnitary(f64),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),

    #[error("matrix is not antisymmetric (max deviation {0:.3e})")]
    NotAntisymmetric(f64),

    #[error("degenerate spectrum: eigenvalues {first} and {second} differ by {gap:.3e}")]
    Degenerate { first: usize, second: usize, gap: f64 },

    #[error("rank mismatch: expected {expected}, found {found}")]
    RankMismatch { expected: usize, found: usize },

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("parameter {0:?} lies outside the model domain")]
    OutsideDomain(Vec<f64>),

    #[error("unknown state family `{0}`")]
    UnknownFamily(String),

    #[error("ill-conditioned matrix: {0}")]
    IllConditioned(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("equality constraints are inconsistent (residual {0:.3e})")]
    InconsistentEqualities(f64),

    #[error("equality constraint matrix is rank deficient")]
    RankDeficient,

    #[error("semidefinite program {0}")]
    Solver(String),

    #[error("POVM is incomplete (‖Σ M − 1‖ = {0:.3e})")]
    IncompletePovm(f64),

    #[error("classical Fisher information is singular (min eigenvalue {0:.3e})")]
    SingularFisher(f64),

    #[error("imaginary-part completion failed (residual {0:.3e})")]
    Completion(f64),

    #[error("at least 16 copies are required, got {0}")]
    TooFewCopies(u64),

    #[error("at least {needed} trials are required, got {got}")]
    InsufficientTrials { needed: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
