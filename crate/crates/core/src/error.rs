use thiserror::Error;

/// Errors raised by the library. Each variant maps to a stable code via
/// [`GapError::code`] so that front ends can report machine-readable failures.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GapError {
    #[error("atom at position {position} has negative mass {mass}")]
    NegativeMass { position: f64, mass: f64 },
    #[error("atom at position {position} has NaN mass")]
    NanMass { position: f64 },
    #[error("atom position is NaN")]
    NanPosition,
    #[error("invalid law: {0}")]
    InvalidLaw(String),
    #[error("speed measure has empty support")]
    EmptySupport,
    #[error("speed measure has no atoms")]
    EmptyMeasure,
    #[error("start point {x0} lies outside the absorbing hull [{lo}, {hi}]")]
    StartOutsideHull { x0: f64, lo: f64, hi: f64 },
    #[error("uniformization rate {rate} x time {t} exceeds the budget after {levels} halvings")]
    RateOverflow { rate: f64, t: f64, levels: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("target mean {target_mean} does not match start point {x0}")]
    MeanMismatch { target_mean: f64, x0: f64 },
    #[error("solver did not converge: residual {residual:e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },
    #[error("declared mean is unknown or not finite")]
    UnknownMean,
    #[error("quantile table is invalid: {0}")]
    InvalidQuantileTable(String),
    #[error("path exceeded the Brownian time budget {cap} on every retry")]
    BudgetExceeded { cap: f64 },
    #[error("operation requires a bundle from the {expected} engine")]
    WrongEngine { expected: &'static str },
    #[error("tail declaration {declared} on the {side} side contradicts the measure's divergence flag")]
    ConflictingTailDeclaration { side: &'static str, declared: &'static str },
    #[error("call curve violates convexity at strike {strike}")]
    ConvexityViolation { strike: f64 },
    #[error("call curve is invalid: {0}")]
    InvalidCurve(String),
    #[error("call curve has positive value {price} at the last strike but a flat slope; tail mass would be negative")]
    NegativeTailMass { price: f64 },
    #[error("parse error: {0}")]
    Parse(String),
}

impl GapError {
    pub fn code(&self) -> &'static str {
        match self {
            GapError::NegativeMass { .. } => "E_NEGATIVE_MASS",
            GapError::NanMass { .. } | GapError::NanPosition => "E_NAN",
            GapError::InvalidLaw(_) => "E_INVALID_LAW",
            GapError::EmptySupport => "E_EMPTY_SUPPORT",
            GapError::EmptyMeasure => "E_EMPTY_MEASURE",
            GapError::StartOutsideHull { .. } => "E_START_OUTSIDE_HULL",
            GapError::RateOverflow { .. } => "E_RATE_OVERFLOW",
            GapError::InvalidArgument(_) => "E_INVALID_ARGUMENT",
            GapError::MeanMismatch { .. } => "E_MEAN_MISMATCH",
            GapError::NotConverged { .. } => "E_NOT_CONVERGED",
            GapError::UnknownMean => "E_UNKNOWN_MEAN",
            GapError::InvalidQuantileTable(_) => "E_INVALID_QUANTILES",
            GapError::BudgetExceeded { .. } => "E_BUDGET_EXCEEDED",
            GapError::WrongEngine { .. } => "E_WRONG_ENGINE",
            GapError::ConflictingTailDeclaration { .. } => "E_TAIL_CONFLICT",
            GapError::ConvexityViolation { .. } => "E_CONVEXITY",
            GapError::InvalidCurve(_) => "E_INVALID_CURVE",
            GapError::NegativeTailMass { .. } => "E_NEGATIVE_TAIL_MASS",
            GapError::Parse(_) => "E_PARSE",
        }
    }
}

pub type Result<T> = std::result::Result<T, GapError>;
