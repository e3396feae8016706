//! Gaussian-copula factor model of portfolio credit loss.
//!
//! Obligor `i` in sector `s` has credit quality
//! `A_i = √(1 − v_s²)·X_s + v_s·ε_i` with common factors `X ~ N(0, Σ)` and
//! independent `ε_i ~ N(0, 1)`. It defaults when `A_i ≤ Φ⁻¹(p_i)`. Because `Σ`
//! has unit diagonal, every `A_i` is standard normal and the threshold is
//! exact. Losses are reported as fractions of the total exposure.
//!
//! Importance sampling acts on the factors only; `ε` is always drawn from its
//! reference law.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use thiserror::Error;

use crate::density::{DensityError, GaussianFamily, MeanShiftFamily, Parameter};
use crate::normal;
use crate::sa::LossMap;

#[derive(Debug, Error)]
pub enum CreditError {
    #[error("default probability {0} outside (0, 1)")]
    InvalidProbability(f64),
    #[error("exposure {0} must be finite and nonnegative")]
    InvalidExposure(f64),
    #[error("sector {sector} out of range 1..={k}")]
    InvalidSector { sector: usize, k: usize },
    #[error("loading {0} outside (0, 1)")]
    InvalidLoading(f64),
    #[error("factor covariance must have unit diagonal (entry {index} is {value})")]
    NonUnitDiagonal { index: usize, value: f64 },
    #[error("portfolio needs at least one obligor with positive total exposure")]
    EmptyPortfolio,
    #[error("expected {expected} loadings, found {found}")]
    LoadingCount { expected: usize, found: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("correlation {rho} is infeasible for {k} sectors (matrix not positive definite)")]
    InfeasibleCorrelation { rho: f64, k: usize },
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Exposure, default probability and 0-based sector of one obligor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obligor {
    pub exposure: f64,
    pub pd: f64,
    pub sector: usize,
}

/// `θ_i = Φ⁻¹(p_i)`.
pub fn calibrate_thresholds(pds: &[f64]) -> Result<Vec<f64>, CreditError> {
    pds.iter()
        .map(|&p| {
            if p > 0.0 && p < 1.0 {
                Ok(normal::inv_cdf(p))
            } else {
                Err(CreditError::InvalidProbability(p))
            }
        })
        .collect()
}

/// Factor covariance `Σ` (unit diagonal) and per-sector idiosyncratic
/// loadings `v_s`.
#[derive(Debug, Clone)]
pub struct SectorModel {
    family: GaussianFamily,
    loadings: Vec<f64>,
}

impl SectorModel {
    pub fn new(correlation: DMatrix<f64>, loadings: Vec<f64>) -> Result<Self, CreditError> {
        let k = correlation.nrows();
        if loadings.len() != k {
            return Err(CreditError::LoadingCount { expected: k, found: loadings.len() });
        }
        if let Some(&v) = loadings.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(CreditError::InvalidLoading(v));
        }
        for i in 0..correlation.nrows().min(correlation.ncols()) {
            let d = correlation[(i, i)];
            if (d - 1.0).abs() > 1e-12 {
                return Err(CreditError::NonUnitDiagonal { index: i, value: d });
            }
        }
        let family = GaussianFamily::new(correlation)?;
        Ok(Self { family, loadings })
    }

    /// `Σ = (1 − ρ) I + ρ 11ᵀ`.
    pub fn equicorrelated(k: usize, rho: f64, loadings: Vec<f64>) -> Result<Self, CreditError> {
        if k == 0 {
            return Err(CreditError::InvalidSpec("k must be at least 1".into()));
        }
        // Positive definite iff −1/(k−1) < ρ < 1; ρ is unused when k = 1.
        if k > 1 && !(rho < 1.0 && rho > -1.0 / (k as f64 - 1.0)) {
            return Err(CreditError::InfeasibleCorrelation { rho, k });
        }
        let corr = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho });
        Self::new(corr, loadings)
    }

    /// Sectors split into two blocks of sizes `⌈k/2⌉` and `⌊k/2⌋`, with
    /// correlation `within` inside a block and `across` between blocks.
    pub fn two_block(k: usize, within: f64, across: f64, loadings: Vec<f64>) -> Result<Self, CreditError> {
        if k == 0 {
            return Err(CreditError::InvalidSpec("k must be at least 1".into()));
        }
        let half = k.div_ceil(2);
        let corr = DMatrix::from_fn(k, k, |i, j| match (i == j, (i < half) == (j < half)) {
            (true, _) => 1.0,
            (false, true) => within,
            (false, false) => across,
        });
        if !(within.abs() < 1.0 && across.abs() < 1.0) || corr.clone().cholesky().is_none() {
            return Err(CreditError::InvalidSpec(format!(
                "block correlation within = {within}, across = {across} is not positive definite for k = {k}"
            )));
        }
        Self::new(corr, loadings)
    }

    pub fn k(&self) -> usize {
        self.loadings.len()
    }

    pub fn loadings(&self) -> &[f64] {
        &self.loadings
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        self.family.covariance()
    }

    /// The factor law `N(θ, Σ)` as a sampling family.
    pub fn family(&self) -> &GaussianFamily {
        &self.family
    }

    /// Reads the sector file format: `k` on the first line, the `k` loadings
    /// on the second, then either a single equicorrelation `ρ` or `k` rows of
    /// the full matrix. Fields are comma-separated; blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_file(path: &Path) -> Result<Self, CreditError> {
        let text = read(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CreditError> {
        let err = |line: usize, message: String| CreditError::Parse { path: origin.to_string(), line, message };
        let mut rows = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let numbers = |line: usize, l: &str| -> Result<Vec<f64>, CreditError> {
            l.split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|e| err(line, format!("`{}`: {e}", f.trim()))))
                .collect()
        };

        let (line, l) = rows.next().ok_or_else(|| err(0, "missing sector count".into()))?;
        let k: usize = l.parse().map_err(|e| err(line, format!("sector count `{l}`: {e}")))?;
        if k == 0 {
            return Err(err(line, "sector count must be at least 1".into()));
        }
        let (line, l) = rows.next().ok_or_else(|| err(line, "missing loadings line".into()))?;
        let loadings = numbers(line, l)?;
        if loadings.len() != k {
            return Err(err(line, format!("expected {k} loadings, found {}", loadings.len())));
        }
        let rest: Vec<(usize, Vec<f64>)> = rows
            .map(|(line, l)| numbers(line, l).map(|v| (line, v)))
            .collect::<Result<_, _>>()?;
        let located = |line: usize, e: CreditError| err(line, e.to_string());
        match rest.as_slice() {
            [(line, single)] if single.len() == 1 => {
                Self::equicorrelated(k, single[0], loadings).map_err(|e| located(*line, e))
            }
            rows if rows.len() == k => {
                let mut m = DMatrix::zeros(k, k);
                for (i, (line, r)) in rows.iter().enumerate() {
                    if r.len() != k {
                        return Err(err(*line, format!("expected {k} matrix entries, found {}", r.len())));
                    }
                    for (j, v) in r.iter().enumerate() {
                        m[(i, j)] = *v;
                    }
                }
                Self::new(m, loadings).map_err(|e| located(rows[0].0, e))
            }
            [] => Err(err(line, "missing correlation parameter or matrix".into())),
            rows => Err(err(
                rows[0].0,
                format!("expected one correlation value or {k} matrix rows, found {} rows", rows.len()),
            )),
        }
    }
}

/// A set of obligors over a sector model, with precomputed thresholds.
#[derive(Debug, Clone)]
pub struct Portfolio {
    obligors: Vec<Obligor>,
    sectors: SectorModel,
    thresholds: Vec<f64>,
    total_exposure: f64,
    factor_scale: Vec<f64>,
}

impl Portfolio {
    pub fn new(obligors: Vec<Obligor>, sectors: SectorModel) -> Result<Self, CreditError> {
        let k = sectors.k();
        for o in &obligors {
            if !(o.exposure >= 0.0 && o.exposure.is_finite()) {
                return Err(CreditError::InvalidExposure(o.exposure));
            }
            if o.sector >= k {
                return Err(CreditError::InvalidSector { sector: o.sector + 1, k });
            }
        }
        let pds: Vec<f64> = obligors.iter().map(|o| o.pd).collect();
        let thresholds = calibrate_thresholds(&pds)?;
        let total_exposure: f64 = obligors.iter().map(|o| o.exposure).sum();
        if obligors.is_empty() || total_exposure <= 0.0 {
            return Err(CreditError::EmptyPortfolio);
        }
        let factor_scale = sectors.loadings().iter().map(|v| (1.0 - v * v).sqrt()).collect();
        Ok(Self { obligors, sectors, thresholds, total_exposure, factor_scale })
    }

    pub fn obligors(&self) -> &[Obligor] {
        &self.obligors
    }

    pub fn sectors(&self) -> &SectorModel {
        &self.sectors
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn total_exposure(&self) -> f64 {
        self.total_exposure
    }

    pub fn len(&self) -> usize {
        self.obligors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obligors.is_empty()
    }

    /// `Σ c_i p_i / Σ c_i`.
    pub fn expected_loss(&self) -> f64 {
        self.obligors.iter().map(|o| o.exposure * o.pd).sum::<f64>() / self.total_exposure
    }

    /// Whether obligor `i` defaults given factors `x` and its noise `eps_i`.
    pub fn defaults(&self, i: usize, x: &DVector<f64>, eps_i: f64) -> bool {
        let o = &self.obligors[i];
        let s = o.sector;
        self.factor_scale[s] * x[s] + self.sectors.loadings[s] * eps_i <= self.thresholds[i]
    }

    /// Loss fraction for factors `x` and idiosyncratic noise `eps`.
    pub fn portfolio_loss(&self, x: &DVector<f64>, eps: &[f64]) -> Result<f64, CreditError> {
        self.check_factors(x)?;
        if eps.len() != self.len() {
            return Err(CreditError::DimensionMismatch { expected: self.len(), found: eps.len() });
        }
        Ok(self.loss_with(x, eps.iter().copied()))
    }

    fn check_factors(&self, x: &DVector<f64>) -> Result<(), CreditError> {
        if x.len() != self.sectors.k() {
            return Err(CreditError::DimensionMismatch { expected: self.sectors.k(), found: x.len() });
        }
        Ok(())
    }

    fn loss_with<I: Iterator<Item = f64>>(&self, x: &DVector<f64>, eps: I) -> f64 {
        let shifted: Vec<f64> = (0..self.sectors.k()).map(|s| self.factor_scale[s] * x[s]).collect();
        let v = &self.sectors.loadings;
        let mut loss = 0.0;
        for ((o, t), e) in self.obligors.iter().zip(&self.thresholds).zip(eps) {
            if shifted[o.sector] + v[o.sector] * e <= *t {
                loss += o.exposure;
            }
        }
        loss / self.total_exposure
    }

    /// Draws factors from `family` at `theta` and noise from its reference law,
    /// returning `(Ψ(X, ε), w_X(θ))`. With `θ = 0` the weight is exactly 1.
    pub fn simulate_loss<F, R>(&self, theta: &Parameter, family: &F, rng: &mut R) -> Result<(f64, f64), CreditError>
    where
        F: MeanShiftFamily,
        R: Rng + ?Sized,
    {
        let x = family.sample(theta, rng)?;
        self.check_factors(&x)?;
        let w = if theta.as_slice().iter().all(|t| *t == 0.0) {
            1.0
        } else {
            family.likelihood_ratio(&x, theta)?
        };
        Ok((self.loss(&x, rng), w))
    }

    /// Reads obligors from a CSV with header `exposure,pd,sector` (sectors
    /// numbered from 1).
    pub fn from_files(portfolio: &Path, sectors: &Path) -> Result<Self, CreditError> {
        let sectors = SectorModel::from_file(sectors)?;
        let text = read(portfolio)?;
        let obligors = parse_obligors(&text, &portfolio.display().to_string(), sectors.k())?;
        Self::new(obligors, sectors)
    }
}

impl LossMap for Portfolio {
    fn loss<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> f64 {
        let n = self.len();
        self.loss_with(x, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
    }
}

fn read(path: &Path) -> Result<String, CreditError> {
    fs::read_to_string(path).map_err(|source| CreditError::Io { path: path.display().to_string(), source })
}

struct PortfolioRow {
    exposure: f64,
    pd: f64,
    sector: usize,
}

/// Parses the obligor CSV, validating each row against `k` sectors.
pub fn parse_obligors(text: &str, origin: &str, k: usize) -> Result<Vec<Obligor>, CreditError> {
    let err = |line: usize, message: String| CreditError::Parse { path: origin.to_string(), line, message };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| err(1, format!("missing column `{name}` (expected exposure,pd,sector)")))
    };
    let (ce, cp, cs) = (col("exposure")?, col("pd")?, col("sector")?);
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize, name: &str| {
            field(i).parse::<f64>().map_err(|e| err(line, format!("{name} `{}`: {e}", field(i))))
        };
        let row = PortfolioRow {
            exposure: num(ce, "exposure")?,
            pd: num(cp, "pd")?,
            sector: field(cs).parse().map_err(|e| err(line, format!("sector `{}`: {e}", field(cs))))?,
        };
        if !(row.exposure >= 0.0 && row.exposure.is_finite()) {
            return Err(err(line, CreditError::InvalidExposure(row.exposure).to_string()));
        }
        if !(row.pd > 0.0 && row.pd < 1.0) {
            return Err(err(line, CreditError::InvalidProbability(row.pd).to_string()));
        }
        if row.sector == 0 || row.sector > k {
            return Err(err(line, CreditError::InvalidSector { sector: row.sector, k }.to_string()));
        }
        out.push(Obligor { exposure: row.exposure, pd: row.pd, sector: row.sector - 1 });
    }
    Ok(out)
}

/// How synthetic exposures are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExposureDistribution {
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    /// `exp(N(μ, σ²))`, heavy enough to create a few concentrated names.
    LogNormal { mu: f64, sigma: f64 },
}

/// Parameters of a random portfolio.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Obligors.
    pub m: usize,
    /// Sectors.
    pub k: usize,
    /// Default probabilities are log-uniform on this range.
    pub pd_range: (f64, f64),
    pub exposure: ExposureDistribution,
    /// Idiosyncratic loadings are uniform on this range.
    pub loading_range: (f64, f64),
    /// Factor correlation between sectors of the same block.
    pub correlation: f64,
    /// Factor correlation between sectors of different blocks; equal to
    /// `correlation` for an equicorrelated model.
    pub cross_correlation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            m: 2000,
            k: 14,
            pd_range: (0.003, 0.04),
            exposure: ExposureDistribution::LogNormal { mu: 0.0, sigma: 1.0 },
            loading_range: (0.75, 0.9),
            correlation: 0.813,
            cross_correlation: 0.66,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), CreditError> {
        let bad = |m: &str| Err(CreditError::InvalidSpec(m.into()));
        if self.m == 0 || self.k == 0 {
            return bad("m and k must be at least 1");
        }
        let (plo, phi) = self.pd_range;
        if !(plo > 0.0 && plo <= phi && phi < 1.0) {
            return bad("pd range must satisfy 0 < lo <= hi < 1");
        }
        let (vlo, vhi) = self.loading_range;
        if !(vlo > 0.0 && vlo <= vhi && vhi < 1.0) {
            return bad("loading range must satisfy 0 < lo <= hi < 1");
        }
        match self.exposure {
            ExposureDistribution::Constant(c) if !(c > 0.0 && c.is_finite()) => bad("constant exposure must be positive"),
            ExposureDistribution::Uniform { lo, hi } if !(lo >= 0.0 && lo <= hi && hi > 0.0 && hi.is_finite()) => {
                bad("uniform exposure range must satisfy 0 <= lo <= hi, hi > 0")
            }
            ExposureDistribution::LogNormal { mu, sigma } if !(mu.is_finite() && sigma >= 0.0 && sigma.is_finite()) => {
                bad("lognormal exposure needs finite mu and sigma >= 0")
            }
            _ => Ok(()),
        }
    }
}

/// Builds a reproducible random portfolio over a two-block sector model.
/// Sectors are assigned round-robin so every sector is populated when `m ≥ k`.
pub fn synthetic_portfolio<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Portfolio, CreditError> {
    spec.validate()?;
    let (vlo, vhi) = spec.loading_range;
    let loadings: Vec<f64> = (0..spec.k).map(|_| uniform(rng, vlo, vhi)).collect();
    let sectors = SectorModel::two_block(spec.k, spec.correlation, spec.cross_correlation, loadings)?;
    let (plo, phi) = spec.pd_range;
    let lognormal = match spec.exposure {
        ExposureDistribution::LogNormal { mu, sigma } => {
            Some(LogNormal::new(mu, sigma).map_err(|e| CreditError::InvalidSpec(e.to_string()))?)
        }
        _ => None,
    };
    let obligors = (0..spec.m)
        .map(|i| {
            let pd = uniform(rng, plo.ln(), phi.ln()).exp().clamp(plo, phi);
            let exposure = match spec.exposure {
                ExposureDistribution::Constant(c) => c,
                ExposureDistribution::Uniform { lo, hi } => uniform(rng, lo, hi),
                ExposureDistribution::LogNormal { .. } => lognormal.as_ref().map_or(1.0, |d| d.sample(rng)),
            };
            Obligor { exposure, pd, sector: i % spec.k }
        })
        .collect();
    Portfolio::new(obligors, sectors)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}
