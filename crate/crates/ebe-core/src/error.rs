use thiserror::Error;

#[derive(Debug, Error)]
pub enum EbeError {
    #[error("P must be nonzero")]
    ZeroP,
    #[error("degree violation: deg Q = {deg_q} exceeds deg R - 1 = {}", *.deg_r as i64 - 1)]
    DegreeViolation { deg_q: usize, deg_r: usize },
    #[error("Q and R are not coprime (resultant magnitude {resultant:.3e} below tolerance)")]
    NotCoprime { resultant: f64 },
    #[error("ambiguous root cluster near {position}: clustering gives multiplicity {cluster}, derivative test gives {derivative}")]
    RootClusterAmbiguity {
        position: num_complex::Complex64,
        cluster: usize,
        derivative: usize,
    },
    #[error("bad grading: {0}")]
    BadGrading(String),
    #[error("two charge points coincide at {0}")]
    DegenerateGeometry(num_complex::Complex64),
    #[error("gauge mismatch at overlap sample: |deviation| = {0:.3e}")]
    GaugeMismatch(f64),
    #[error("Newton line search failed {halvings} times; last residual {residual:.3e}")]
    NewtonStall { halvings: usize, residual: f64 },
    #[error("continuation stalled at t = {t}; last residual {residual:.3e}")]
    ContinuationStall { t: f64, residual: f64 },
    #[error("Krylov solver stalled after {iterations} iterations; relative residual {relative_residual:.3e}")]
    KrylovStall {
        iterations: usize,
        relative_residual: f64,
    },
    #[error("metric sample determinant deviates from 1 by {0:.3e}")]
    SingularMetric(f64),
    #[error("matrix log branch failure: eigenvalue ratio on the negative real axis")]
    LogBranch,
    #[error("non-positive metric sample; Cholesky factorization failed")]
    FactorizationFailure,
    #[error("coincident points in Green's kernel")]
    CoincidentPoints,
    #[error("insufficient dynamic range for decay fit: values span {decades:.2} decades")]
    InsufficientDynamicRange { decades: f64 },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EbeError>;
