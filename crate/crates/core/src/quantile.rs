//! Weighted empirical distribution functions and quantile estimators.
//!
//! Given adaptively generated pairs `(Y_i, w_i)` three step functions are
//! available, all scaled by a normalization value `ν(n)`:
//!
//! * [`EcdfKind::Renorm`]: `F(y) = (Σ w_i 1{Y_i ≤ y}) / (ν Σ w_i)`
//! * [`EcdfKind::Left`]:   `F(y) = (Σ w_i 1{Y_i ≤ y}) / ν`
//! * [`EcdfKind::Right`]:  `F(y) = 1 − (Σ w_i 1{Y_i > y}) / ν`
//!
//! The quantile estimate is the generalized inverse
//! `F^←(α) = inf{y : F(y) ≥ α}` restricted to the stored sample values.
//! `ν(n)` comes from [`normalization_nu`]: the identity choice reproduces the
//! classical estimators, the LIL choice shifts them conservatively by the
//! iterated-logarithm envelope so that they converge even where the quantile
//! is not unique.

use std::fmt;
use std::io;
use std::str::FromStr;

use thiserror::Error;

use crate::numfmt;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantileError {
    #[error("no samples")]
    Empty,
    #[error("invalid sample at index {index}: y = {y}, w = {w}")]
    InvalidSample { index: usize, y: f64, w: f64 },
    #[error("probability level {0} outside (0, 1)")]
    InvalidLevel(f64),
    #[error("estimator undefined at level {alpha} for this sample (sup F = {sup})")]
    LevelUnreachable { alpha: f64, sup: f64 },
    #[error("n = {n} too small for this normalization")]
    TooSmall { n: usize },
    #[error("normalization dominates n: correction {correction:.4e} exceeds n = {n}")]
    NormalizationDominates { n: usize, correction: f64 },
    #[error("normalization value must be positive and finite, got {0}")]
    InvalidNu(f64),
    #[error("invalid normalization spec: {0}")]
    InvalidSpec(String),
}

/// One adaptive draw: the loss `y = Ψ(X_i)` and its likelihood-ratio weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedSample {
    pub y: f64,
    pub w: f64,
}

impl WeightedSample {
    pub fn new(y: f64, w: f64) -> Self {
        Self { y, w }
    }

    pub fn unit(y: f64) -> Self {
        Self { y, w: 1.0 }
    }

    fn is_valid(&self) -> bool {
        !self.y.is_nan() && self.w.is_finite() && self.w > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EcdfKind {
    Renorm,
    Left,
    Right,
}

impl EcdfKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EcdfKind::Renorm => "renorm",
            EcdfKind::Left => "left",
            EcdfKind::Right => "right",
        }
    }
}

impl fmt::Display for EcdfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A weighted step function stored as sorted distinct values with
/// cumulative weights.
#[derive(Debug, Clone)]
pub struct WeightedEcdf {
    ys: Vec<f64>,
    cum: Vec<f64>,
    total: f64,
    count: usize,
    kind: EcdfKind,
    nu: f64,
}

impl WeightedEcdf {
    pub fn new(samples: &[WeightedSample], kind: EcdfKind, nu: f64) -> Result<Self, QuantileError> {
        if samples.is_empty() {
            return Err(QuantileError::Empty);
        }
        if !(nu.is_finite() && nu > 0.0) {
            return Err(QuantileError::InvalidNu(nu));
        }
        if let Some((index, s)) = samples.iter().enumerate().find(|(_, s)| !s.is_valid()) {
            return Err(QuantileError::InvalidSample { index, y: s.y, w: s.w });
        }
        let mut sorted: Vec<(f64, f64)> = samples.iter().map(|s| (s.y, s.w)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut ys = Vec::with_capacity(sorted.len());
        let mut cum: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut running = 0.0;
        for (y, w) in sorted {
            running += w;
            match ys.last() {
                Some(&last) if last == y => *cum.last_mut().unwrap() = running,
                _ => {
                    ys.push(y);
                    cum.push(running);
                }
            }
        }
        Ok(Self {
            ys,
            cum,
            total: running,
            count: samples.len(),
            kind,
            nu,
        })
    }

    /// Builds the ECDF with `ν(n)` from [`normalization_nu`].
    ///
    /// In Feldman–Tucker mode `ν` is an order-statistic index rather than a
    /// scale, so the identity scale is used here.
    pub fn with_spec(
        samples: &[WeightedSample],
        alpha: f64,
        kind: EcdfKind,
        spec: &NormalizationSpec,
    ) -> Result<Self, QuantileError> {
        let nu = match spec.mode {
            NormalizationMode::FeldmanTucker => identity_nu(samples.len(), kind),
            _ => normalization_nu(samples.len(), alpha, kind, spec)?,
        };
        Self::new(samples, kind, nu)
    }

    pub fn kind(&self) -> EcdfKind {
        self.kind
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn total_weight(&self) -> f64 {
        self.total
    }

    /// Distinct sample values in increasing order.
    pub fn values(&self) -> &[f64] {
        &self.ys
    }

    fn from_cum(&self, c: f64) -> f64 {
        match self.kind {
            EcdfKind::Renorm => c / self.total / self.nu,
            EcdfKind::Left => c / self.nu,
            // 1 − (T − c)/ν, arranged so unit weights with ν = n give c/n exactly.
            EcdfKind::Right => (self.nu - self.total + c) / self.nu,
        }
    }

    fn cum_at(&self, y: f64) -> f64 {
        match self.ys.partition_point(|&v| v <= y) {
            0 => 0.0,
            i => self.cum[i - 1],
        }
    }

    pub fn eval(&self, y: f64) -> f64 {
        self.from_cum(self.cum_at(y))
    }

    /// Values of the step function at the stored grid points.
    pub fn grid_values(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ys.iter().zip(&self.cum).map(|(&y, &c)| (y, self.from_cum(c)))
    }

    /// `inf{y : F(y) ≥ α}` over the stored values.
    pub fn generalized_inverse(&self, alpha: f64) -> Result<f64, QuantileError> {
        check_level(alpha)?;
        let i = self.cum.partition_point(|&c| self.from_cum(c) < alpha);
        self.ys.get(i).copied().ok_or(QuantileError::LevelUnreachable {
            alpha,
            sup: self.from_cum(self.total),
        })
    }

    /// Lower and upper quantiles: `inf{y : F(y) ≥ α}` and the smallest stored
    /// value with `F(y) > α`.
    pub fn quantile_pair(&self, alpha: f64) -> Result<QuantilePair, QuantileError> {
        let lower = self.generalized_inverse(alpha)?;
        let j = self.cum.partition_point(|&c| self.from_cum(c) <= alpha);
        let upper = self.ys.get(j).copied().ok_or(QuantileError::LevelUnreachable {
            alpha,
            sup: self.from_cum(self.total),
        })?;
        Ok(QuantilePair { lower, upper })
    }

    /// Writes the step function as CSV with columns `y,F_value,kind,nu`.
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["y", "F_value", "kind", "nu"])?;
        let nu = numfmt::sig(self.nu, 6);
        for (y, f) in self.grid_values() {
            w.write_record([numfmt::sig(y, 6), numfmt::sig(f, 6), self.kind.to_string(), nu.clone()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Lower quantile `q_α` and upper quantile `q^α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantilePair {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormalizationMode {
    Identity,
    Lil,
    FeldmanTucker,
}

impl FromStr for NormalizationMode {
    type Err = QuantileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Self::Identity),
            "lil" => Ok(Self::Lil),
            "ft" | "feldman_tucker" => Ok(Self::FeldmanTucker),
            other => Err(QuantileError::InvalidSpec(format!("unknown normalization mode `{other}`"))),
        }
    }
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Lil => "lil",
            Self::FeldmanTucker => "ft",
        })
    }
}

/// Parameters of the normalization function `ν(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationSpec {
    pub mode: NormalizationMode,
    /// Slack `η > 0` on the LIL envelope.
    pub eta: f64,
    /// Plug-in for the variance of the weights at the tuned parameter.
    pub weight_variance: f64,
    /// Plug-in for the variance of the weighted tail indicator; `1/4` bounds
    /// it for every parameter.
    pub tail_variance: f64,
    /// Feldman–Tucker constants: `(1+k)√(2 w_α n log log n) ≤ ⌊nα⌋ − ν(n) ≤ K n^{1/2+γ}`.
    pub ft_k: f64,
    pub ft_gamma: f64,
    pub ft_big_k: f64,
    pub ft_w_alpha: f64,
    /// Level used by [`tail_probability`] in LIL mode, where no `α` is given.
    pub nominal_alpha: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            mode: NormalizationMode::Identity,
            eta: 0.1,
            weight_variance: 1.0,
            tail_variance: 0.25,
            ft_k: 0.1,
            ft_gamma: 0.25,
            ft_big_k: 1.0,
            ft_w_alpha: 0.25,
            nominal_alpha: 0.999,
        }
    }
}

impl NormalizationSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: NormalizationMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), QuantileError> {
        let bad = |msg: &str| Err(QuantileError::InvalidSpec(msg.to_string()));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.weight_variance >= 0.0 && self.weight_variance.is_finite()) {
            return bad("weight variance must be nonnegative");
        }
        if !(self.tail_variance > 0.0 && self.tail_variance.is_finite()) {
            return bad("tail variance must be positive");
        }
        if !(self.ft_gamma > 0.0 && self.ft_gamma < 0.5) {
            return bad("gamma must lie in (0, 1/2)");
        }
        if !(self.ft_k >= 0.0 && self.ft_big_k > 0.0) {
            return bad("k must be nonnegative and K positive");
        }
        if !(self.ft_w_alpha > 0.0 && self.ft_w_alpha <= 0.25) {
            return bad("w_alpha must lie in (0, 1/4]");
        }
        if !(self.nominal_alpha > 0.0 && self.nominal_alpha < 1.0) {
            return bad("nominal alpha must lie in (0, 1)");
        }
        Ok(())
    }

    /// Replaces the variance proxies by sample variances from a run: the
    /// variance of `w_i` and of `w_i 1{Y_i > q̂}`.
    pub fn with_plugin_variances(mut self, samples: &[WeightedSample], q_hat: f64) -> Self {
        self.weight_variance = sample_variance(samples.iter().map(|s| s.w));
        let tail = sample_variance(samples.iter().map(|s| if s.y > q_hat { s.w } else { 0.0 }));
        if tail > 0.0 {
            self.tail_variance = tail;
        }
        self
    }
}

fn sample_variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
}

fn check_level(alpha: f64) -> Result<(), QuantileError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(QuantileError::InvalidLevel(alpha))
    }
}

/// The LIL envelope `√(2 t log log t)`, with `t` floored at `e^e` so it is
/// defined (and at least `√(2e^e)`) for every `t ≥ 0`.
pub fn lil_envelope(t: f64) -> f64 {
    let t = t.max(std::f64::consts::E.powf(std::f64::consts::E));
    (2.0 * t * t.ln().ln()).sqrt()
}

fn identity_nu(n: usize, kind: EcdfKind) -> f64 {
    match kind {
        EcdfKind::Renorm => 1.0,
        EcdfKind::Left | EcdfKind::Right => n as f64,
    }
}

/// The Feldman–Tucker order-statistic index
/// `⌊nα⌋ − ⌈(1+k)√(2 w_α n log log n)⌉`.
pub fn feldman_tucker_index(n: usize, alpha: f64, spec: &NormalizationSpec) -> Result<usize, QuantileError> {
    check_level(alpha)?;
    spec.validate()?;
    let nf = n as f64;
    let base = (nf * alpha).floor();
    let gap = ((1.0 + spec.ft_k) * lil_envelope(nf) * spec.ft_w_alpha.sqrt()).ceil();
    let index = base - gap;
    if index < 1.0 {
        return Err(QuantileError::TooSmall { n });
    }
    if gap > spec.ft_big_k * nf.powf(0.5 + spec.ft_gamma) {
        return Err(QuantileError::InvalidSpec(format!(
            "Feldman–Tucker gap {gap} exceeds K n^(1/2+γ) at n = {n}"
        )));
    }
    Ok(index as usize)
}

/// `ν(n)` for the requested estimator kind.
///
/// * identity: `1` for renorm, `n` for left/right.
/// * lil: right `n + (1+η)/(1−α)·φ(n v̂_α)`, left `n − (1+η)/α·φ(n v̂_α)`,
///   renorm `(n − (1+η)/α·φ(n v̂_α)) / (n + (1+η)φ(n v̂))`, with
///   `φ(t) = √(2t log log t)`.
/// * Feldman–Tucker: the order-statistic index of [`feldman_tucker_index`].
pub fn normalization_nu(
    n: usize,
    alpha: f64,
    kind: EcdfKind,
    spec: &NormalizationSpec,
) -> Result<f64, QuantileError> {
    if n == 0 {
        return Err(QuantileError::Empty);
    }
    check_level(alpha)?;
    spec.validate()?;
    let nf = n as f64;
    match spec.mode {
        NormalizationMode::Identity => Ok(identity_nu(n, kind)),
        NormalizationMode::FeldmanTucker => feldman_tucker_index(n, alpha, spec).map(|i| i as f64),
        NormalizationMode::Lil => {
            let tail = (1.0 + spec.eta) * lil_envelope(nf * spec.tail_variance);
            match kind {
                EcdfKind::Right => {
                    let correction = tail / (1.0 - alpha);
                    if correction > nf {
                        return Err(QuantileError::NormalizationDominates { n, correction });
                    }
                    Ok(nf + correction)
                }
                EcdfKind::Left => {
                    let nu = nf - tail / alpha;
                    if nu <= 0.0 {
                        return Err(QuantileError::TooSmall { n });
                    }
                    Ok(nu)
                }
                EcdfKind::Renorm => {
                    let num = nf - tail / alpha;
                    if num <= 0.0 {
                        return Err(QuantileError::TooSmall { n });
                    }
                    let den = nf + (1.0 + spec.eta) * lil_envelope(nf * spec.weight_variance);
                    Ok(num / den)
                }
            }
        }
    }
}

/// `F^←_{n,w,ν}(α)` for the requested kind and normalization.
pub fn quantile_estimate(
    samples: &[WeightedSample],
    alpha: f64,
    kind: EcdfKind,
    spec: &NormalizationSpec,
) -> Result<f64, QuantileError> {
    let n = samples.len();
    if n == 0 {
        return Err(QuantileError::Empty);
    }
    match spec.mode {
        NormalizationMode::FeldmanTucker => {
            let index = feldman_tucker_index(n, alpha, spec)?;
            let ecdf = WeightedEcdf::new(samples, kind, identity_nu(n, kind))?;
            ecdf.generalized_inverse(index as f64 / n as f64)
        }
        _ => {
            let nu = normalization_nu(n, alpha, kind, spec)?;
            WeightedEcdf::new(samples, kind, nu)?.generalized_inverse(alpha)
        }
    }
}

/// The fitted step function evaluated at `λ`, clamped to `[0, 1]`.
///
/// LIL mode uses `spec.nominal_alpha`; Feldman–Tucker mode uses the identity
/// scale.
pub fn tail_probability(
    samples: &[WeightedSample],
    lambda: f64,
    kind: EcdfKind,
    spec: &NormalizationSpec,
) -> Result<f64, QuantileError> {
    let ecdf = WeightedEcdf::with_spec(samples, spec.nominal_alpha, kind, spec)?;
    Ok(ecdf.eval(lambda).clamp(0.0, 1.0))
}

/// The adaptive importance sampling mean `(1/n) Σ w_i f_i`.
pub fn adaptive_mean<I>(pairs: I) -> Result<f64, QuantileError>
where
    I: IntoIterator<Item = (f64, f64)>,
{
    let (n, sum) = pairs
        .into_iter()
        .fold((0usize, 0.0), |(n, s), (f, w)| (n + 1, s + w * f));
    if n == 0 {
        return Err(QuantileError::Empty);
    }
    Ok(sum / n as f64)
}
