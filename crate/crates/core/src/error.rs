use thiserror::Error;

/// Errors produced anywhere in the association-testing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty genotype matrix")]
    EmptyMatrix,

    #[error("no variants remain after filtering")]
    NoVariantsRemain,

    #[error("variant {0} has no observed genotypes")]
    AllMissing(String),

    #[error("genotype matrix contains missing entries; impute first")]
    MissingValues,

    #[error("variant {variant} has MAF {maf}; weights need MAF in (0, 0.5]")]
    InvalidMaf { variant: usize, maf: f64 },

    #[error("variant weights are all zero")]
    DegenerateWeights,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("kernel trace {0} is not positive")]
    NonPositiveTrace(f64),

    #[error("covariate design is rank deficient")]
    RankDeficientDesign,

    #[error("working covariance singular")]
    SingularCovariance,

    #[error("working covariance singular at iteration {0}")]
    SingularAtIteration(usize),

    #[error("MINQUE system could not be solved")]
    UnsolvableSystem,

    #[error("information matrix singular (condition number {condition:.3e})")]
    SingularInformation { condition: f64 },

    #[error("non-positive variance {value} for component {index}")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("residual variance is zero; null model is degenerate")]
    DegenerateNullModel,

    #[error("kernel not positive semi-definite (eigenvalue {0})")]
    NotPsd(f64),

    #[error("no positive eigenvalues in the null distribution")]
    NoPositiveEigenvalues,

    #[error("characteristic function inversion failed (fault {0})")]
    Integration(u8),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Innermost error, with stage labels stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerical machinery rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            Error::SingularCovariance
                | Error::SingularAtIteration(_)
                | Error::UnsolvableSystem
                | Error::SingularInformation { .. }
                | Error::NotPsd(_)
                | Error::Integration(_)
                | Error::NonPositiveVariance { .. }
                | Error::DegenerateNullModel
                | Error::NoPositiveEigenvalues
                | Error::TooManyFailures { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
