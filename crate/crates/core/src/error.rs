use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Model,
    Augment,
    Koopman,
    Spectral,
    TransitionMap,
    Inversion,
    Costates,
    Verification,
    Io,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Model => "model",
            Stage::Augment => "augment",
            Stage::Koopman => "koopman",
            Stage::Spectral => "spectral",
            Stage::TransitionMap => "transition-map",
            Stage::Inversion => "inversion",
            Stage::Costates => "costates",
            Stage::Verification => "verification",
            Stage::Io => "io",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("polynomial degree {degree} exceeds basis order {max_order}")]
    DegreeExceedsOrder { degree: u32, max_order: u32 },
    #[error("multi-index {0:?} is not part of the basis")]
    NotInBasis(Vec<u32>),
    #[error(
        "eigenvector matrix condition number {condition:.3e} exceeds {limit:.1e}; \
         use the matrix-exponential propagator"
    )]
    IllConditionedEigenbasis { condition: f64, limit: f64 },
    #[error("eigendecomposition residual {residual:.3e} exceeds {limit:.3e}")]
    EigenResidual { residual: f64, limit: f64 },
    #[error("imaginary residual {residual:.3e} exceeds tolerance {limit:.3e}")]
    ImaginaryResidual { residual: f64, limit: f64 },
    #[error("linear part is singular or ill-conditioned (condition {condition:.3e})")]
    SingularLinearPart { condition: f64 },
    #[error("map is not square: {inputs} inputs, {outputs} outputs")]
    NonSquareMap { inputs: usize, outputs: usize },
    #[error("{name} = {value:.6e} lies outside twice the domain half-width {half_width:.6e}")]
    OutsideDomain {
        name: String,
        value: f64,
        half_width: f64,
    },
    #[error("velocity Hessian of the Lagrangian is not the identity")]
    NonIdentityVelocityHessian,
    #[error("odd power of the radius survived in potential term of order {0}")]
    OddRadiusPower(u32),
    #[error("integration step size underflow at t = {t:.6e}")]
    StepSizeUnderflow { t: f64 },
    #[error("integration exceeded {0} steps")]
    TooManySteps(usize),
    #[error("shooting did not converge in {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("shooting line search failed at residual {residual:.3e}")]
    LineSearchFailed { residual: f64 },
    #[error("trajectory spans [{start}, {end}], expected [0, {tf}]")]
    SpanMismatch { start: f64, end: f64, tf: f64 },
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, past any stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// Bad input as opposed to a numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::DimensionMismatch { .. }
                | Error::IndexOutOfRange { .. }
                | Error::InvalidInput(_)
                | Error::DegreeExceedsOrder { .. }
                | Error::NotInBasis(_)
                | Error::NonSquareMap { .. }
                | Error::OutsideDomain { .. }
                | Error::NonIdentityVelocityHessian
                | Error::SpanMismatch { .. }
                | Error::Json(_)
                | Error::Io(_)
        )
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
