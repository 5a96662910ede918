use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("step-size schedule is defined for t >= 1")]
    ZeroIteration,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("matrix is not Hurwitz (max real eigenvalue {0})")]
    NotHurwitz(f64),
    #[error("ill-conditioned matrix (condition number {0:e})")]
    IllConditioned(f64),
    #[error("unstable policy: {0}")]
    UnstablePolicy(String),
    #[error("no admissible root: {0}")]
    NoRoot(String),
    #[error("iterate diverged at t={t} (norm {norm:e})")]
    Diverged { t: u64, norm: f64 },
    #[error("io: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ZeroIteration => "zero_iteration",
            Error::NonFinite(_) => "non_finite",
            Error::Degenerate(_) => "degenerate",
            Error::NotHurwitz(_) => "not_hurwitz",
            Error::IllConditioned(_) => "ill_conditioned",
            Error::UnstablePolicy(_) => "unstable_policy",
            Error::NoRoot(_) => "no_root",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Config(_) => "config",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
