use thiserror::Error;

use crate::stability::LyapunovReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("model `{model}` requires parameter `{param}`")]
    MissingParameter { model: String, param: String },
    #[error("model `{model}` does not take parameter `{param}`")]
    UnknownParameter { model: String, param: String },
    #[error("parameter `{param}` must be positive, got {value}")]
    NonPositiveParameter { param: String, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operation not supported for model `{0}`")]
    UnsupportedModel(String),
    #[error("model `{0}` is not linear")]
    NonLinearModel(String),
    #[error("mixed x-p second derivatives are not supported")]
    NonSeparableModel,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("trajectory became non-finite at t = {}", partial.horizon)]
    NonFiniteTrajectory { partial: Box<LyapunovReport> },
    #[error("all {0} paths were excluded as truncated")]
    AllPathsExcluded(usize),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("variance is not strictly positive at t = {t}")]
    NonPositiveVariance { t: f64 },
    #[error("only {inside:.6} of the initial mass lies inside the grid")]
    MassOutsideDomain { inside: f64 },
    #[error("advective CFL number {courant:.4} exceeds 1")]
    CflViolation { courant: f64 },
    #[error("explicit diffusion number {number:.4} exceeds 1/2")]
    StabilityViolation { number: f64 },
    #[error("need at least {required} samples inside the grid, got {got}")]
    TooFewSamples { required: usize, got: usize },
}
