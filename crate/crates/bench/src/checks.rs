//! Reference implementations and law checks shared by the self-test and the
//! acceptance suite.

use aisq_core::{EcdfKind, WeightedEcdf, WeightedSample};
use rand::Rng;

/// `α`-quantile of unit-weight data by sorting: the `k`-th order statistic
/// for the smallest `k` with `k/n ≥ α`.
pub fn order_statistic(ys: &[f64], alpha: f64) -> f64 {
    let mut sorted = ys.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let k = (1..=n).find(|&k| k as f64 / n as f64 >= alpha).unwrap_or(n);
    sorted[k - 1]
}

/// A random weighted step function: 1 to 40 samples on a coarse grid (so ties
/// occur), weights spanning three orders of magnitude, a random kind and `ν`.
pub fn random_step_function<R: Rng + ?Sized>(rng: &mut R) -> Result<WeightedEcdf, aisq_core::quantile::QuantileError> {
    let n = rng.random_range(1..=40);
    let samples: Vec<WeightedSample> = (0..n)
        .map(|_| {
            let y = f64::from(rng.random_range(-20..20)) / 4.0;
            let w = 10f64.powf(rng.random_range(-2.0..1.0));
            WeightedSample::new(y, w)
        })
        .collect();
    let total: f64 = samples.iter().map(|s| s.w).sum();
    let (kind, nu) = match rng.random_range(0..3) {
        0 => (EcdfKind::Renorm, 1.0),
        1 => (EcdfKind::Left, total * rng.random_range(0.8..1.25)),
        _ => (EcdfKind::Right, total * rng.random_range(1.0..1.5)),
    };
    WeightedEcdf::new(&samples, kind, nu)
}

/// Checks the generalized-inverse laws of a right-continuous step function
/// `F` at every probe `x` and every level `α` that `F` reaches above its value
/// at `−∞`:
///
/// 1. `F(x) ≥ α ⇔ F←(α) ≤ x`
/// 2. `F(x) < α ⇔ F←(α) > x`
/// 3. `F(F←(α)) ≥ α`
/// 4. `F←(F(x)) ≤ x`
/// 5. `F←` is nondecreasing and left-continuous at the stored levels.
///
/// Returns a description of the first violation.
pub fn inverse_law_violation(f: &WeightedEcdf, probes: &[f64], alphas: &[f64]) -> Option<String> {
    let bottom = f.eval(f64::NEG_INFINITY);
    let top = f.grid_values().map(|(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    let reachable = |a: f64| a > bottom && a <= top && a > 0.0 && a < 1.0;
    let inv = |a: f64| f.generalized_inverse(a).ok();

    let mut levels: Vec<f64> = alphas.iter().copied().filter(|a| reachable(*a)).collect();
    levels.extend(f.grid_values().map(|(_, v)| v).filter(|a| reachable(*a)));
    levels.sort_by(|a, b| a.total_cmp(b));

    for &a in &levels {
        let Some(q) = inv(a) else {
            return Some(format!("F←({a}) undefined although F reaches {top}"));
        };
        if f.eval(q) < a {
            return Some(format!("law 3: F(F←({a})) = {} < {a}", f.eval(q)));
        }
        for &x in probes {
            let fx = f.eval(x);
            if (fx >= a) != (q <= x) {
                return Some(format!("law 1 at x = {x}, α = {a}: F(x) = {fx}, F←(α) = {q}"));
            }
            if (fx < a) != (q > x) {
                return Some(format!("law 2 at x = {x}, α = {a}: F(x) = {fx}, F←(α) = {q}"));
            }
        }
    }
    for &x in probes {
        let fx = f.eval(x);
        if reachable(fx) {
            match inv(fx) {
                Some(q) if q <= x => {}
                other => return Some(format!("law 4 at x = {x}: F←(F(x)) = {other:?}")),
            }
        }
    }
    let mut prev: Option<(f64, f64)> = None;
    for &a in &levels {
        let q = inv(a)?;
        if let Some((pa, pq)) = prev {
            if q < pq {
                return Some(format!("law 5: F←({a}) = {q} < F←({pa}) = {pq}"));
            }
            // Approaching a stored level from the left must not change the
            // inverse unless the previous level is crossed.
            let below = a - ((a - pa) / 2.0).min(1e-12);
            if below > pa && inv(below) != Some(q) {
                return Some(format!("law 5: F← not left-continuous at {a}"));
            }
        }
        prev = Some((a, q));
    }
    None
}

/// Probes at, between and beyond the stored values.
pub fn probes(f: &WeightedEcdf) -> Vec<f64> {
    let ys = f.values();
    let mut out = Vec::with_capacity(2 * ys.len() + 2);
    out.push(ys[0] - 1.0);
    for (i, &y) in ys.iter().enumerate() {
        out.push(y);
        out.push(ys.get(i + 1).map_or(y + 1.0, |next| (y + next) / 2.0));
    }
    out
}
