//! Standard normal distribution helpers.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use std::sync::OnceLock;

fn standard() -> &'static Normal {
    static N: OnceLock<Normal> = OnceLock::new();
    N.get_or_init(Normal::standard)
}

pub fn pdf(x: f64) -> f64 {
    standard().pdf(x)
}

pub fn cdf(x: f64) -> f64 {
    standard().cdf(x)
}

/// Upper tail `1 - Φ(x)`, accurate far into the tail.
pub fn sf(x: f64) -> f64 {
    standard().sf(x)
}

/// `Φ⁻¹(p)` for `p` in `[0, 1]`; returns ±∞ at the endpoints.
pub fn inv_cdf(p: f64) -> f64 {
    standard().inverse_cdf(p)
}
