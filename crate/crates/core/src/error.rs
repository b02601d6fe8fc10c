use thiserror::Error;

/// Errors raised by the simulation, classification and tree routines.
///
/// The variants split into input validation problems ([`Error::InvalidInput`],
/// [`Error::ShapeMismatch`], [`Error::NotPsd`], ...) and refusals, where the
/// inputs are well-formed but the requested construction is meaningless for
/// the model at hand ([`Error::Refused`]). The CLI maps the first group to
/// exit code 2 and refusals to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("covariance is not positive semidefinite at t = {t}: min eigenvalue {min_eigenvalue:e}, max eigenvalue {max_eigenvalue:e}")]
    NotPsd {
        t: f64,
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },

    #[error("too many exploded paths: {excluded} of {total} excluded (limit {limit_percent}%)")]
    ExclusionRate {
        excluded: usize,
        total: usize,
        limit_percent: f64,
    },

    #[error("refused: {0}")]
    Refused(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tree format error at line {line}: {message}")]
    TreeFormat { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn refused(msg: impl Into<String>) -> Self {
        Error::Refused(msg.into())
    }

    /// True for errors caused by the caller's input rather than by a refused
    /// precondition or by the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::ShapeMismatch(_)
                | Error::NotSymmetric { .. }
                | Error::NotPsd { .. }
                | Error::UnknownModel(_)
                | Error::Config(_)
                | Error::TreeFormat { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
