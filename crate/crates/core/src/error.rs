use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("degenerate labels: at least two distinct classes are required, found {distinct}")]
    DegenerateLabels { distinct: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("row {row} of {what} does not sum to 1 (sum = {sum})")]
    RowSum {
        what: &'static str,
        row: usize,
        sum: f64,
    },

    #[error("zero normalizer at row {row}: source posterior and conditional ratios are contradictory")]
    ZeroNormalizer { row: usize },

    #[error("target prior {target} unreachable for intercepts in [{lo}, {hi}]")]
    Unreachable { target: f64, lo: f64, hi: f64 },

    #[error("empty stratum y={label}, z={z}: cannot draw {needed} rows")]
    EmptyStratum { label: usize, z: u8, needed: usize },

    #[error("undefined recall: class {class} never occurs in the true labels")]
    UndefinedRecall { class: usize },

    #[error("non-finite surrogate log-likelihood at EM iteration {iteration}")]
    NonFiniteSurrogate { iteration: usize },

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ZeroNormalizer { .. } | Error::NonFiniteSurrogate { .. } => ErrorKind::Numerical,
            Error::Unreachable { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
