//! Quadrature oracles written without the library's normal code.

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

/// `∫_q^∞ g(x) φ(x)²/φ(x − θ) dx`, the reference-measure integral of
/// `g · w_θ · 1{x > q}`.
pub fn weighted_tail(g: impl Fn(f64) -> f64, theta: f64, q: f64) -> f64 {
    let upper = q.max(-theta).max(theta) + 16.0;
    simpson(|x| g(x) * pdf(x) * pdf(x) / pdf(x - theta), q, upper, 40_000)
}

/// `P(Z > x)` for a standard normal `Z`.
pub fn normal_sf(x: f64) -> f64 {
    simpson(pdf, x, x.max(0.0) + 16.0, 40_000)
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
