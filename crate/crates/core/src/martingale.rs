//! Martingale diagnostics for adaptive importance sampling streams.
//!
//! With `ξ_i = w_i f_i − μ`, the partial sums `M_n = Σ ξ_i` form a martingale
//! under the adaptive scheme. The diagnostics here track its total and
//! predictable quadratic variations and check the iterated-logarithm envelope
//! `|M_n| ≤ (1+η)√(2 W_n log log W_n)` along a trace.

use std::io;

use nalgebra::DVector;
use thiserror::Error;

use crate::density::{DensityError, MeanShiftFamily, Parameter};
use crate::numfmt;
use crate::quantile::lil_envelope;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MartingaleError {
    #[error("predictable variation is unavailable (some increment had no conditional moment)")]
    MissingPredictable,
    #[error("predictable variation is zero")]
    ZeroPredictable,
    #[error("moment order p = {0} must be at least 1")]
    InvalidOrder(f64),
    #[error("lil_check needs n0 >= 3, got {0}")]
    InvalidStart(usize),
    #[error("no samples")]
    Empty,
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// One row of a recorded trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub n: u64,
    pub m: f64,
    pub qv_total: f64,
    pub qv_pred: Option<f64>,
}

/// Running accumulators of `M_n`, `[M]_n` and `⟨M⟩_n`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MartingaleTrace {
    n: u64,
    sum: f64,
    qv_total: f64,
    qv_pred: Option<f64>,
    history: Option<Vec<TracePoint>>,
}

impl MartingaleTrace {
    pub fn new() -> Self {
        Self { qv_pred: Some(0.0), ..Self::default() }
    }

    /// Keeps every intermediate state, for [`lil_check`] and CSV output.
    pub fn with_history() -> Self {
        Self { history: Some(Vec::new()), ..Self::new() }
    }

    /// Adds the increment `ξ`. `⟨M⟩` advances by `cond − μ²`, where the
    /// caller passes that centred value as `conditional_variance`. Once an
    /// increment arrives without it, `⟨M⟩` is dropped for the rest of the
    /// trace.
    pub fn accumulate(&mut self, xi: f64, conditional_variance: Option<f64>) {
        debug_assert!(xi.is_finite(), "increment must be finite");
        self.n += 1;
        self.sum += xi;
        self.qv_total += xi * xi;
        self.qv_pred = match (self.qv_pred, conditional_variance) {
            (Some(p), Some(c)) => Some(p + c),
            _ => None,
        };
        if let Some(h) = self.history.as_mut() {
            h.push(TracePoint { n: self.n, m: self.sum, qv_total: self.qv_total, qv_pred: self.qv_pred });
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// `M_n`.
    pub fn sum(&self) -> f64 {
        self.sum
    }

    /// `[M]_n`.
    pub fn qv_total(&self) -> f64 {
        self.qv_total
    }

    /// `⟨M⟩_n`, if every increment came with a conditional moment.
    pub fn qv_pred(&self) -> Option<f64> {
        self.qv_pred
    }

    pub fn history(&self) -> Option<&[TracePoint]> {
        self.history.as_deref()
    }

    /// `[M]_n / ⟨M⟩_n`.
    pub fn variation_ratio(&self) -> Result<f64, MartingaleError> {
        match self.qv_pred {
            None => Err(MartingaleError::MissingPredictable),
            Some(p) if p <= 0.0 => Err(MartingaleError::ZeroPredictable),
            Some(p) => Ok(self.qv_total / p),
        }
    }

    /// `(W_n, M_n)` pairs for [`lil_check`].
    pub fn weighted_history(&self, weighting: WeightingSequence) -> Option<Vec<(f64, f64)>> {
        let h = self.history.as_ref()?;
        h.iter()
            .map(|p| {
                let w = match weighting {
                    WeightingSequence::TotalQv => Some(p.qv_total),
                    WeightingSequence::PredictableQv => p.qv_pred,
                    WeightingSequence::VarianceProxy(s2) => Some(s2 * p.n as f64),
                };
                w.map(|w| (w, p.m))
            })
            .collect()
    }

    /// Writes the recorded history as CSV with columns
    /// `n,M,QV_total,QV_pred,envelope,within`. The envelope uses `W_n = [M]_n`
    /// unless another weighting is given.
    pub fn write_csv<W: io::Write>(
        &self,
        band: &LilBand,
        weighting: WeightingSequence,
        out: W,
    ) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "M", "QV_total", "QV_pred", "envelope", "within"])?;
        for p in self.history.as_deref().unwrap_or(&[]) {
            let wn = match weighting {
                WeightingSequence::TotalQv => Some(p.qv_total),
                WeightingSequence::PredictableQv => p.qv_pred,
                WeightingSequence::VarianceProxy(s2) => Some(s2 * p.n as f64),
            };
            let (env, within) = match wn {
                Some(wn) => {
                    let e = band.envelope(wn);
                    (numfmt::sig(e, 6), u8::from(p.m.abs() <= e).to_string())
                }
                None => (String::new(), String::new()),
            };
            w.write_record([
                p.n.to_string(),
                numfmt::sig(p.m, 6),
                numfmt::sig(p.qv_total, 6),
                p.qv_pred.map(|v| numfmt::sig(v, 6)).unwrap_or_default(),
                env,
                within,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The normalizing sequence `W_n` of the envelope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightingSequence {
    /// `[M]_n`.
    TotalQv,
    /// `⟨M⟩_n`.
    PredictableQv,
    /// `s_n² = n σ²` for a known or estimated per-step variance.
    VarianceProxy(f64),
}

/// The band `(1+η)·φ(t)`, `φ(t) = √(2t log log t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LilBand {
    pub eta: f64,
}

impl Default for LilBand {
    fn default() -> Self {
        Self { eta: 0.1 }
    }
}

impl LilBand {
    pub fn envelope(&self, t: f64) -> f64 {
        (1.0 + self.eta) * lil_envelope(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LilReport {
    /// Fraction of steps `n ≥ n0` with `|M_n|` inside the band.
    pub fraction_within: f64,
    /// `max |M_n|/φ(W_n)` over `n ≥ n0`.
    pub sup_ratio: f64,
    /// `max |M_n|/φ(W_n)` over the last decade `n ∈ [N/10, N]`; a finite-n
    /// proxy for the limsup, not the limit itself.
    pub limsup_estimate: f64,
    pub checked: usize,
}

/// Checks the envelope on a history of `(W_n, M_n)`, indexed from `n = 1`.
pub fn lil_check(history: &[(f64, f64)], band: &LilBand, n0: usize) -> Result<LilReport, MartingaleError> {
    if n0 < 3 {
        return Err(MartingaleError::InvalidStart(n0));
    }
    let total = history.len();
    let mut within = 0usize;
    let mut checked = 0usize;
    let mut sup_ratio = 0.0f64;
    let mut limsup = 0.0f64;
    let decade = total / 10;
    for (i, &(w, m)) in history.iter().enumerate() {
        let n = i + 1;
        if n < n0 {
            continue;
        }
        let phi = lil_envelope(w);
        let ratio = m.abs() / phi;
        checked += 1;
        if m.abs() <= (1.0 + band.eta) * phi {
            within += 1;
        }
        sup_ratio = sup_ratio.max(ratio);
        if n >= decade {
            limsup = limsup.max(ratio);
        }
    }
    let fraction_within = if checked == 0 { 1.0 } else { within as f64 / checked as f64 };
    Ok(LilReport { fraction_within, sup_ratio, limsup_estimate: limsup, checked })
}

/// `(1/n) Σ |w_x(θ) f(x)|^p` over draws `x`, each with the parameter it was
/// drawn from.
pub fn moment_estimate<F, Fx>(
    samples: &[(DVector<f64>, Parameter)],
    family: &F,
    f: Fx,
    p: f64,
) -> Result<f64, MartingaleError>
where
    F: MeanShiftFamily,
    Fx: Fn(&DVector<f64>) -> f64,
{
    if !(p >= 1.0) {
        return Err(MartingaleError::InvalidOrder(p));
    }
    if samples.is_empty() {
        return Err(MartingaleError::Empty);
    }
    let mut sum = 0.0;
    for (x, theta) in samples {
        let fx = f(x);
        if fx == 0.0 {
            continue;
        }
        sum += (family.likelihood_ratio(x, theta)? * fx).abs().powf(p);
    }
    Ok(sum / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::GaussianFamily;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn zero_increments() {
        let mut t = MartingaleTrace::new();
        for _ in 0..10 {
            t.accumulate(0.0, None);
        }
        assert_eq!((t.sum(), t.qv_total()), (0.0, 0.0));
        assert_eq!(t.qv_pred(), None);
    }

    #[test]
    fn plus_minus_one() {
        let mut t = MartingaleTrace::new();
        t.accumulate(1.0, Some(1.0));
        t.accumulate(-1.0, Some(1.0));
        assert_eq!(t.sum(), 0.0);
        assert_eq!(t.qv_total(), 2.0);
        assert_eq!(t.variation_ratio().unwrap(), 1.0);
    }

    #[test]
    fn ratio_single_step() {
        let mut t = MartingaleTrace::new();
        t.accumulate(2.0, Some(4.0));
        assert_eq!(t.variation_ratio().unwrap(), 1.0);
        let mut t = MartingaleTrace::new();
        t.accumulate(2.0, None);
        assert_eq!(t.variation_ratio(), Err(MartingaleError::MissingPredictable));
        assert_eq!(MartingaleTrace::new().variation_ratio(), Err(MartingaleError::ZeroPredictable));
    }

    #[test]
    fn normal_increments_qv() {
        let mut r = rng::from_seed(11);
        let mut t = MartingaleTrace::new();
        let n = 1_000_000;
        for _ in 0..n {
            let xi: f64 = r.sample(StandardNormal);
            t.accumulate(xi, Some(1.0));
        }
        assert!((t.qv_total() / n as f64 - 1.0).abs() < 0.01);
        assert!((t.variation_ratio().unwrap() - 1.0).abs() < 0.05);
    }

    #[test]
    fn qv_monotone() {
        let mut r = rng::from_seed(12);
        let mut t = MartingaleTrace::with_history();
        for _ in 0..500 {
            t.accumulate(r.random::<f64>() - 0.5, Some(1.0 / 12.0));
        }
        let h = t.history().unwrap();
        assert!(h.windows(2).all(|w| w[1].qv_total >= w[0].qv_total));
        assert!(h.windows(2).all(|w| w[1].qv_pred.unwrap() >= w[0].qv_pred.unwrap()));
    }

    #[test]
    fn zero_martingale_lil() {
        let hist: Vec<(f64, f64)> = (1..=1000).map(|n| (n as f64, 0.0)).collect();
        let rep = lil_check(&hist, &LilBand::default(), 100).unwrap();
        assert_eq!(rep.fraction_within, 1.0);
        assert_eq!(rep.sup_ratio, 0.0);
        assert!(lil_check(&hist, &LilBand::default(), 2).is_err());
    }

    #[test]
    fn envelope_nondecreasing() {
        let band = LilBand::default();
        let mut prev = band.envelope(0.0);
        for i in 1..10_000 {
            let e = band.envelope(i as f64 * 0.37);
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn moment_of_one_is_one() {
        let fam = GaussianFamily::identity(1).unwrap();
        let theta = Parameter::from_slice(&[0.8]).unwrap();
        let mut r = rng::from_seed(13);
        let draws: Vec<_> = (0..200_000)
            .map(|_| (fam.sample(&theta, &mut r).unwrap(), theta.clone()))
            .collect();
        let m = moment_estimate(&draws, &fam, |_| 1.0, 1.0).unwrap();
        // Var(w) = e^{θ²} − 1.
        let se = (0.8f64.powi(2).exp() - 1.0).sqrt() / (draws.len() as f64).sqrt();
        assert!((m - 1.0).abs() < 4.0 * se, "m = {m}");
        assert_eq!(moment_estimate(&draws, &fam, |_| 0.0, 2.0).unwrap(), 0.0);
        assert!(moment_estimate(&draws, &fam, |_| 1.0, 0.5).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut t = MartingaleTrace::with_history();
        t.accumulate(1.0, None);
        let mut buf = Vec::new();
        t.write_csv(&LilBand::default(), WeightingSequence::TotalQv, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("n,M,QV_total,QV_pred,envelope,within"));
        assert!(lines.next().unwrap().starts_with("1,1,1,,"));
    }
}
