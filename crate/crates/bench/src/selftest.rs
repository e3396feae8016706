//! Fast self-test: oracle equivalences, generalized-inverse laws and
//! unit-weight identities, each against stored reference constants.

use std::fmt;

use aisq_core::density::MeanShiftFamily;
use aisq_core::quantile::{adaptive_mean, feldman_tucker_index, lil_envelope, quantile_estimate};
use aisq_core::sa::{tail_gradient, StepMode, StepSchedule};
use aisq_core::{normal, rng, EcdfKind, GaussianFamily, NormalizationMode, NormalizationSpec, Parameter, WeightedEcdf, WeightedSample};
use nalgebra::DVector;
use rand::Rng;

use crate::checks::{inverse_law_violation, order_statistic, probes, random_step_function};

/// Reference values the checks compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConstants {
    /// `Φ⁻¹(0.01)`.
    pub normal_quantile_01: f64,
    /// `1 − Φ(2)`.
    pub normal_tail_2: f64,
    /// `φ(2)`, minus the derivative of `e^{θ²}(1 − Φ(2 + θ))` at `θ = 0`.
    pub normal_density_2: f64,
    /// `e^{−3}`, the tail gradient at `x = 2`, `θ = 1`, `q = 0` (negated).
    pub tail_gradient_example: f64,
    /// Feldman–Tucker index at `n = 10^5`, `α = 1/2`.
    pub ft_index_1e5: usize,
    /// Minimizer of `e^{θ²}(1 − Φ(3.09023 + θ))`.
    pub theta_star: f64,
    /// `γ_7` of the Polyak schedule with `a = 1`.
    pub polyak_gamma_7: f64,
}

impl Default for OracleConstants {
    fn default() -> Self {
        Self {
            normal_quantile_01: -2.326_347_874_040_841,
            normal_tail_2: 0.022_750_131_948_179_2,
            normal_density_2: 0.053_990_966_513_188_06,
            tail_gradient_example: 0.049_787_068_367_863_94,
            ft_index_1e5: 49_615,
            theta_star: 3.2411,
            polyak_gamma_7: 0.25,
        }
    }
}

impl OracleConstants {
    /// Field names accepted by [`corrupt`](Self::corrupt).
    pub const NAMES: &'static [&'static str] = &[
        "normal_quantile_01",
        "normal_tail_2",
        "normal_density_2",
        "tail_gradient_example",
        "ft_index_1e5",
        "theta_star",
        "polyak_gamma_7",
    ];

    /// Perturbs one constant, to demonstrate that the checks notice.
    pub fn corrupt(&mut self, name: &str) -> Result<(), String> {
        match name {
            "normal_quantile_01" => self.normal_quantile_01 += 0.01,
            "normal_tail_2" => self.normal_tail_2 *= 1.01,
            "normal_density_2" => self.normal_density_2 *= 1.1,
            "tail_gradient_example" => self.tail_gradient_example += 1e-3,
            "ft_index_1e5" => self.ft_index_1e5 += 1,
            "theta_star" => self.theta_star += 0.1,
            "polyak_gamma_7" => self.polyak_gamma_7 += 0.01,
            other => return Err(format!("unknown constant `{other}` (known: {})", Self::NAMES.join(", "))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// `None` on success, otherwise what went wrong.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.failure.is_none())
    }

    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| c.failure.is_some())
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            match &c.failure {
                None => writeln!(f, "PASS {}", c.name)?,
                Some(why) => writeln!(f, "FAIL {}: {why}", c.name)?,
            }
        }
        let failed = self.failed().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

type Check = fn(&OracleConstants) -> Result<(), String>;

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name} = {got}, expected {want} ± {tol}"))
    }
}

fn normal_oracles(c: &OracleConstants) -> Result<(), String> {
    close("inv_cdf(0.01)", normal::inv_cdf(0.01), c.normal_quantile_01, 1e-9)?;
    close("sf(2)", normal::sf(2.0), c.normal_tail_2, 1e-11)?;
    close("pdf(2)", normal::pdf(2.0), c.normal_density_2, 1e-12)
}

fn order_statistic_equivalence(_: &OracleConstants) -> Result<(), String> {
    let mut r = rng::from_seed(101);
    let spec = NormalizationSpec::identity();
    for d in 0..300 {
        let n = r.random_range(1..=200);
        let ys: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let samples: Vec<WeightedSample> = ys.iter().copied().map(WeightedSample::unit).collect();
        let alpha = r.random_range(0.001..0.999);
        let got = quantile_estimate(&samples, alpha, EcdfKind::Right, &spec).map_err(|e| e.to_string())?;
        let want = order_statistic(&ys, alpha);
        if got.to_bits() != want.to_bits() {
            return Err(format!("dataset {d} (n = {n}, α = {alpha}): {got} vs order statistic {want}"));
        }
    }
    Ok(())
}

fn inverse_laws(_: &OracleConstants) -> Result<(), String> {
    let mut r = rng::from_seed(202);
    for i in 0..1000 {
        let f = random_step_function(&mut r).map_err(|e| e.to_string())?;
        let alphas: Vec<f64> = (0..10).map(|_| r.random_range(0.001..0.999)).collect();
        if let Some(v) = inverse_law_violation(&f, &probes(&f), &alphas) {
            return Err(format!("function {i}: {v}"));
        }
    }
    Ok(())
}

fn unit_weight_identities(_: &OracleConstants) -> Result<(), String> {
    let mut r = rng::from_seed(303);
    let ys: Vec<f64> = (0..97).map(|_| r.random_range(0.0..1.0)).collect();
    let samples: Vec<WeightedSample> = ys.iter().copied().map(WeightedSample::unit).collect();
    let n = samples.len() as f64;
    let kinds = [(EcdfKind::Renorm, 1.0), (EcdfKind::Left, n), (EcdfKind::Right, n)];
    let ecdfs: Vec<WeightedEcdf> = kinds
        .iter()
        .map(|&(k, nu)| WeightedEcdf::new(&samples, k, nu).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    for &y in &ys {
        let count = ys.iter().filter(|v| **v <= y).count() as f64;
        for e in &ecdfs {
            close(&format!("{} F({y})", e.kind()), e.eval(y), count / n, 1e-12)?;
        }
    }
    let mean = adaptive_mean(ys.iter().map(|&y| (y, 1.0))).map_err(|e| e.to_string())?;
    close("adaptive mean", mean, ys.iter().sum::<f64>() / n, 1e-12)?;
    let family = GaussianFamily::identity(3).map_err(|e| e.to_string())?;
    let x = DVector::from_vec(vec![0.3, -1.2, 2.0]);
    let w = family.likelihood_ratio(&x, &Parameter::zeros(3)).map_err(|e| e.to_string())?;
    if w != 1.0 {
        return Err(format!("likelihood ratio at the reference is {w}"));
    }
    Ok(())
}

fn tail_gradient_example(c: &OracleConstants) -> Result<(), String> {
    let family = GaussianFamily::identity(1).map_err(|e| e.to_string())?;
    let x = DVector::from_element(1, 2.0);
    let theta = Parameter::from_slice(&[1.0]).map_err(|e| e.to_string())?;
    let g = tail_gradient(&family, &x, 2.0, &theta, 0.0).map_err(|e| e.to_string())?;
    close("Ĥ(2, 1)", g[0], -c.tail_gradient_example, 1e-12)
}

fn tail_gradient_mean(c: &OracleConstants) -> Result<(), String> {
    let family = GaussianFamily::identity(1).map_err(|e| e.to_string())?;
    let theta = Parameter::zeros(1);
    let mut r = rng::from_seed(404);
    let n = 200_000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let x = family.sample(&theta, &mut r).map_err(|e| e.to_string())?;
        let g = tail_gradient(&family, &x, x[0], &theta, 2.0).map_err(|e| e.to_string())?[0];
        sum += g;
        sq += g * g;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    close("mean Ĥ at θ = 0, q = 2", mean, -c.normal_density_2, 4.0 * se)
}

fn change_of_measure(c: &OracleConstants) -> Result<(), String> {
    let family = GaussianFamily::identity(1).map_err(|e| e.to_string())?;
    let theta = Parameter::from_slice(&[2.0]).map_err(|e| e.to_string())?;
    let mut r = rng::from_seed(505);
    let n = 200_000;
    let mut ws = Vec::with_capacity(n);
    let mut tail = Vec::with_capacity(n);
    for _ in 0..n {
        let x = family.sample(&theta, &mut r).map_err(|e| e.to_string())?;
        let w = family.likelihood_ratio(&x, &theta).map_err(|e| e.to_string())?;
        ws.push(w);
        tail.push(if x[0] > 2.0 { w } else { 0.0 });
    }
    let (mw, vw) = crate::stats::mean_var(&ws);
    close("weighted mean of 1", mw, 1.0, 4.0 * (vw / n as f64).sqrt())?;
    let (mt, vt) = crate::stats::mean_var(&tail);
    close("weighted P(X > 2)", mt, c.normal_tail_2, 4.0 * (vt / n as f64).sqrt())
}

fn feldman_tucker(c: &OracleConstants) -> Result<(), String> {
    let spec = NormalizationSpec::with_mode(NormalizationMode::FeldmanTucker);
    let got = feldman_tucker_index(100_000, 0.5, &spec).map_err(|e| e.to_string())?;
    if got != c.ft_index_1e5 {
        return Err(format!("index {got}, expected {}", c.ft_index_1e5));
    }
    close("φ(e^e)", lil_envelope(0.0), (2.0 * std::f64::consts::E.powf(std::f64::consts::E)).sqrt(), 1e-12)
}

fn schedule(c: &OracleConstants) -> Result<(), String> {
    let s = StepSchedule::new(1.0, StepMode::Polyak).map_err(|e| e.to_string())?;
    close("γ_7", s.step_size(7).0, c.polyak_gamma_7, 1e-15)?;
    let s = StepSchedule::new(2.0, StepMode::Classic).map_err(|e| e.to_string())?;
    close("classic γ_3", s.step_size(3).0, 0.5, 0.0)
}

fn theta_star(c: &OracleConstants) -> Result<(), String> {
    // Stationarity of e^{θ²}(1 − Φ(q + θ)): 2θ(1 − Φ(q + θ)) = φ(q + θ).
    let q = 3.090_23;
    let t = c.theta_star;
    let lhs = 2.0 * t * normal::sf(q + t);
    let rhs = normal::pdf(q + t);
    if (lhs / rhs - 1.0).abs() > 1e-3 {
        return Err(format!("θ* = {t} is not stationary: 2θ(1 − Φ) / φ = {}", lhs / rhs));
    }
    Ok(())
}

const CHECKS: &[(&str, Check)] = &[
    ("normal_oracles", normal_oracles),
    ("order_statistic_equivalence", order_statistic_equivalence),
    ("generalized_inverse_laws", inverse_laws),
    ("unit_weight_identities", unit_weight_identities),
    ("tail_gradient_example", tail_gradient_example),
    ("tail_gradient_mean", tail_gradient_mean),
    ("change_of_measure", change_of_measure),
    ("feldman_tucker_index", feldman_tucker),
    ("step_schedule", schedule),
    ("theta_star_stationarity", theta_star),
];

/// Runs every check. Seeds are fixed, so repeated runs give identical reports.
pub fn selftest(constants: &OracleConstants) -> SelftestReport {
    SelftestReport {
        checks: CHECKS
            .iter()
            .map(|&(name, check)| CheckResult { name, failure: check(constants).err() })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupt_names_are_known() {
        let mut c = OracleConstants::default();
        for name in OracleConstants::NAMES {
            c.corrupt(name).unwrap();
        }
        assert!(c.corrupt("nope").is_err());
    }
}
