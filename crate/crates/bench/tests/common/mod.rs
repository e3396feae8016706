//! Quadrature oracles, independent of the library's normal and likelihood
//! code.

#![allow(dead_code)]

use std::f64::consts::PI;

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Composite Simpson rule with `intervals` (rounded up to even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let m = intervals + intervals % 2;
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for i in 1..m {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `P(Z > x)` for a standard normal `Z`, `x ≥ −8`.
pub fn normal_sf(x: f64) -> f64 {
    simpson(pdf, x, x.max(0.0) + 14.0, 20_000)
}

/// `m(θ) = E_0[w(θ) 1{X > q}] = ∫_q^∞ φ(x)²/φ(x − θ) dx` in one dimension.
pub fn second_moment_1d(theta: f64, q: f64, intervals: usize) -> f64 {
    let upper = q.max(-theta) + 14.0;
    simpson(|x| pdf(x) * pdf(x) / pdf(x - theta), q, upper, intervals)
}

/// `m'(θ) = ∫_q^∞ (θ − x) φ(x)²/φ(x − θ) dx`.
pub fn second_moment_slope_1d(theta: f64, q: f64) -> f64 {
    let upper = q.max(-theta) + 14.0;
    simpson(|x| (theta - x) * pdf(x) * pdf(x) / pdf(x - theta), q, upper, 20_000)
}

/// Minimizer of the 1-D second moment by bisection on its slope.
pub fn optimal_shift_1d(q: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, q + 2.0);
    assert!(second_moment_slope_1d(lo, q) < 0.0 && second_moment_slope_1d(hi, q) > 0.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if second_moment_slope_1d(mid, q) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// A bivariate normal `N(θ, Σ)` with unit variances and correlation `rho`.
#[derive(Debug, Clone, Copy)]
pub struct Bivariate {
    pub rho: f64,
}

impl Bivariate {
    pub fn density(&self, x: [f64; 2], theta: [f64; 2]) -> f64 {
        let (u, v) = (x[0] - theta[0], x[1] - theta[1]);
        let det = 1.0 - self.rho * self.rho;
        let quad = (u * u - 2.0 * self.rho * u * v + v * v) / det;
        (-0.5 * quad).exp() / (2.0 * PI * det.sqrt())
    }

    /// `Σ⁻¹ g`.
    pub fn precision_times(&self, g: [f64; 2]) -> [f64; 2] {
        let det = 1.0 - self.rho * self.rho;
        [(g[0] - self.rho * g[1]) / det, (g[1] - self.rho * g[0]) / det]
    }

    /// `∫∫_{x0 > q} h(x) dx` by tensor Simpson over a box wide enough for
    /// Gaussian integrands centred within a few units of the origin.
    pub fn integrate_tail(&self, q: f64, h: impl Fn([f64; 2]) -> f64, panels: usize) -> f64 {
        simpson(|x0| simpson(|x1| h([x0, x1]), -12.0, 12.0, 2 * panels), q, q + 12.0, panels)
    }

    /// `m(θ) = ∫∫_{x0 > q} φ_0(x)²/φ_θ(x) dx`.
    pub fn second_moment(&self, theta: [f64; 2], q: f64, panels: usize) -> f64 {
        let zero = [0.0, 0.0];
        self.integrate_tail(q, |x| self.density(x, zero).powi(2) / self.density(x, theta), panels)
    }
}

/// Ranks `1..n` (ties get the mean rank).
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn mean_and_se(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for x in xs {
        n += 1.0;
        s += x;
        s2 += x * x;
    }
    let mean = s / n;
    let var = (s2 / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}
