use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// A derivative of `H` was requested inside the guard cone around `p = 0`.
    #[error("NonsmoothPoint: derivative of H requested at |p| = {p_norm:e} (guard {guard:e})")]
    NonsmoothPoint { p_norm: f64, guard: f64 },

    #[error("ModelInvalid: {0}")]
    ModelInvalid(String),

    /// The costate vanishes at the anchor, so the arc is the trivial dual arc `p = 0`.
    #[error("DegenerateCostate: |p| = {norm:e} is below the guard radius")]
    DegenerateCostate { norm: f64 },

    #[error("OutOfDomain: {0}")]
    OutOfDomain(String),

    #[error("ContaminatedRegion: {0}")]
    ContaminatedRegion(String),

    #[error("AsymmetryDrift: |R - R^T| = {asymmetry:e} at t = {t}")]
    AsymmetryDrift { t: f64, asymmetry: f64 },

    #[error("PrePostViolation: {0}")]
    PrePostViolation(String),

    #[error("PremiseFailed [{check}]: {reason}")]
    PremiseFailed { check: String, reason: String },

    #[error("InvalidInput: {0}")]
    InvalidInput(String),
}

impl Error {
    /// Short name of the variant, used in CLI diagnostics and report files.
    pub fn name(&self) -> &'static str {
        match self {
            Error::NonsmoothPoint { .. } => "NonsmoothPoint",
            Error::ModelInvalid(_) => "ModelInvalid",
            Error::DegenerateCostate { .. } => "DegenerateCostate",
            Error::OutOfDomain(_) => "OutOfDomain",
            Error::ContaminatedRegion(_) => "ContaminatedRegion",
            Error::AsymmetryDrift { .. } => "AsymmetryDrift",
            Error::PrePostViolation(_) => "PrePostViolation",
            Error::PremiseFailed { .. } => "PremiseFailed",
            Error::InvalidInput(_) => "InvalidInput",
        }
    }

    pub(crate) fn premise(check: &str, reason: impl Into<String>) -> Self {
        Error::PremiseFailed {
            check: check.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
