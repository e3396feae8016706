//! Concrete problems: sampling family, loss map, thresholds and loss grid.

use aisq_core::credit::{synthetic_portfolio, Portfolio};
use aisq_core::quantile::quantile_estimate;
use aisq_core::sa::{Bridging, GradientSpec, LossMap};
use aisq_core::{rng, EcdfKind, GaussianFamily, MeanShiftFamily, NormalizationSpec, ReducedFamily, WeightedSample};
use nalgebra::DVector;
use rand::Rng;

use crate::config::{parse_loss_grid, ExperimentConfig, ProblemKind};
use crate::BenchError;

/// Default thresholds of the 1-D problem; `q2` is the 99.9% standard normal
/// quantile.
pub const GAUSS_Q1: f64 = 1.0;
pub const GAUSS_Q2: f64 = 3.09023;
pub const GAUSS_GRID: &str = "2.09:4.09:0.5";
/// Default step scales. The credit parameter lives on the principal-component
/// scale, where the optimum is several units away from the reference.
pub const GAUSS_A: f64 = 1.0;
pub const CREDIT_A: f64 = 3.0;
/// Loss levels of the credit benchmark, as fractions of total exposure.
pub const CREDIT_GRID: &str = "0.10:0.35:0.01";
/// Stream index reserved for the pilot run, outside any replication index.
pub const PILOT_STREAM: u64 = u64::MAX;
/// Pilot levels that pick `q1` and `q2` when they are not configured. A low
/// `q1` gets frequent gradient hits from the start, so the chain leaves the
/// reference parameter within a few dozen draws.
pub const PILOT_LEVELS: (f64, f64) = (0.9, 0.999);

/// `Ψ(x) = x_0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FirstCoordinate;

impl LossMap for FirstCoordinate {
    fn loss<R: Rng + ?Sized>(&self, x: &DVector<f64>, _rng: &mut R) -> f64 {
        x[0]
    }
}

#[derive(Debug, Clone)]
pub enum Problem {
    Gauss1d { family: GaussianFamily },
    Credit { portfolio: Box<Portfolio>, family: ReducedFamily },
}

/// Crude quantiles of the pilot run.
#[derive(Debug, Clone, PartialEq)]
pub struct Pilot {
    pub n: usize,
    pub levels: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Setup {
    pub problem: Problem,
    pub spec: GradientSpec,
    pub loss_grid: Vec<f64>,
    pub pilot: Option<Pilot>,
    pub step_scale: f64,
}

impl Setup {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self, BenchError> {
        cfg.validate()?;
        match cfg.problem {
            ProblemKind::Gauss1d => {
                let q1 = cfg.q1.unwrap_or(GAUSS_Q1);
                let q2 = cfg.q2.unwrap_or(GAUSS_Q2);
                Ok(Self {
                    problem: Problem::Gauss1d { family: GaussianFamily::identity(1)? },
                    spec: GradientSpec::new(q1, q2, Bridging::Log)?,
                    loss_grid: grid(cfg, GAUSS_GRID)?,
                    pilot: None,
                    step_scale: cfg.a.unwrap_or(GAUSS_A),
                })
            }
            ProblemKind::Credit => {
                let portfolio = match (&cfg.portfolio, &cfg.sectors) {
                    (Some(p), Some(s)) => Portfolio::from_files(p, s)?,
                    _ => synthetic_portfolio(&cfg.synthetic, &mut rng::from_seed(cfg.portfolio_seed))?,
                };
                let family = portfolio.sectors().family().reduce(cfg.reduce)?;
                let pilot = if cfg.q1.is_none() || cfg.q2.is_none() {
                    Some(pilot_run(&family, &portfolio, cfg)?)
                } else {
                    None
                };
                let level = |i: usize| pilot.as_ref().map(|p| p.levels[i].1);
                let q1 = cfg.q1.or(level(0)).expect("pilot supplies q1");
                let q2 = cfg.q2.or(level(1)).expect("pilot supplies q2");
                if !(q1 < q2) {
                    return Err(BenchError::InvalidConfig(format!(
                        "thresholds must satisfy q1 < q2, got q1 = {q1}, q2 = {q2}; set them explicitly"
                    )));
                }
                Ok(Self {
                    problem: Problem::Credit { portfolio: Box::new(portfolio), family },
                    spec: GradientSpec::new(q1, q2, Bridging::Log)?,
                    loss_grid: grid(cfg, CREDIT_GRID)?,
                    pilot,
                    step_scale: cfg.a.unwrap_or(CREDIT_A),
                })
            }
        }
    }

    pub fn param_dim(&self) -> usize {
        match &self.problem {
            Problem::Gauss1d { family } => family.param_dim(),
            Problem::Credit { family, .. } => family.param_dim(),
        }
    }
}

fn grid(cfg: &ExperimentConfig, default: &str) -> Result<Vec<f64>, BenchError> {
    match &cfg.loss_grid {
        Some(g) => Ok(g.clone()),
        None => parse_loss_grid(default).map_err(BenchError::InvalidConfig),
    }
}

/// Crude draws at the reference parameter.
pub fn crude_samples<F, L, R>(family: &F, loss: &L, n: usize, rng: &mut R) -> Result<Vec<WeightedSample>, BenchError>
where
    F: MeanShiftFamily,
    L: LossMap,
    R: Rng + ?Sized,
{
    let reference = family.reference();
    (0..n)
        .map(|_| {
            let x = family.sample(&reference, rng)?;
            Ok(WeightedSample::unit(loss.loss(&x, rng)))
        })
        .collect()
}

fn pilot_run(family: &ReducedFamily, portfolio: &Portfolio, cfg: &ExperimentConfig) -> Result<Pilot, BenchError> {
    let mut stream = rng::stream(cfg.seed, PILOT_STREAM);
    let samples = crude_samples(family, portfolio, cfg.pilot_n, &mut stream)?;
    let spec = NormalizationSpec::identity();
    let levels = [PILOT_LEVELS.0, PILOT_LEVELS.1]
        .into_iter()
        .map(|a| Ok((a, quantile_estimate(&samples, a, EcdfKind::Right, &spec)?)))
        .collect::<Result<_, BenchError>>()?;
    Ok(Pilot { n: cfg.pilot_n, levels })
}
