//! Quantile estimation under adaptive importance sampling.
//!
//! The crate is organised bottom-up:
//!
//! * [`density`]: Gaussian mean-shift sampling families with fixed covariance,
//!   their likelihood ratios and Fisher-metric gradients, and PCA-reduced
//!   parametrizations.
//! * [`sa`]: stochastic approximation with adaptive truncation that tunes the
//!   sampling mean by minimizing the second moment of a weighted tail
//!   indicator, with bridging between a moderate and an extreme threshold.
//! * [`quantile`]: weighted empirical distribution functions, generalized
//!   inverses and the normalized quantile estimators built on them.
//! * [`martingale`]: martingale and law-of-iterated-logarithm diagnostics for
//!   the weighted increments produced by a run.
//! * [`credit`]: a Gaussian-copula factor model of portfolio credit loss.
//!
//! Random streams come from [`rng`], which derives independent reproducible
//! ChaCha streams from a base seed and a stream index.

pub mod credit;
pub mod density;
pub mod martingale;
pub mod normal;
pub mod numfmt;
pub mod quantile;
pub mod rng;
pub mod sa;

pub use density::{GaussianFamily, MeanShiftFamily, Parameter, ReducedFamily};
pub use quantile::{EcdfKind, NormalizationMode, NormalizationSpec, WeightedEcdf, WeightedSample};
pub use sa::{GradientSpec, SaConfig, SaRun, SaState, StepSchedule, StepScaling};
