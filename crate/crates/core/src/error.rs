use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the numerical routines of this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:.3e}, largest {largest:.3e})")]
    NotPsd { eigenvalue: f64, largest: f64 },

    #[error("covariance is singular (smallest eigenvalue {smallest:.3e}, largest {largest:.3e})")]
    Singular { smallest: f64, largest: f64 },

    #[error("infeasible transport marginals: row mass {row_mass}, column mass {col_mass}")]
    InfeasibleMarginals { row_mass: f64, col_mass: f64 },

    #[error("stationary distribution is not unique: {0}")]
    NonUniqueStationary(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("pair ({i}, {j}): {source}")]
    Pair {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by arithmetic rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical(_) | Error::Singular { .. } | Error::NonUniqueStationary(_) => true,
            Error::Pair { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
