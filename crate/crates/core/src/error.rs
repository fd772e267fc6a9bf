//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is singular")]
    SingularMatrix,

    #[error("SVD did not converge within the iteration cap")]
    NoConvergence,

    #[error("least-squares system is rank deficient")]
    RankDeficient,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("degenerate element (area {area:.3e})")]
    DegenerateElement { area: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("mesh defines no electrodes")]
    NoElectrodes,

    #[error("forward system is singular (non-positive conductivity or disconnected mesh)")]
    SingularSystem,

    #[error("dense Hessian requested for {got} elements, cap is {cap}")]
    CapExceeded { cap: usize, got: usize },

    #[error("evaluation point coincides with the source point")]
    SourceOnBoundary,

    #[error("missing field: {0}")]
    MissingField(String),

    #[error("conductivity contrast must be positive, got {0}")]
    InvalidContrast(f64),

    #[error("initial Hessian diagonal is not strictly positive at entry {0}")]
    NonPositiveDiagonal(usize),

    #[error("curvature condition violated (s'y = {0:.3e})")]
    CurvatureViolation(f64),

    #[error("line search failed after {0} trials")]
    LineSearchFailed(usize),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Errors caused by bad inputs or files, as opposed to numerical
    /// breakdown while solving. The CLI maps the former to exit code 2 and
    /// the latter to exit code 3.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidParam(_)
                | Error::MissingField(_)
                | Error::Parse(_)
                | Error::Io(_)
                | Error::DimensionMismatch { .. }
                | Error::NoElectrodes
        )
    }
}
