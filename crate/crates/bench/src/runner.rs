//! The `compare`, `trace` and `ecdf` experiments.
//!
//! Replication `r` of an experiment with base seed `s` draws from streams
//! derived from `rng::derive_seed(s, r)`: index 0 feeds the crude run, 1 the
//! adaptive run and 2 the frozen re-sampling. Results are collected in
//! replication order, so outputs do not depend on the thread count.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use aisq_core::martingale::{lil_check, LilBand, LilReport, MartingaleTrace, WeightingSequence};
use aisq_core::normal;
use aisq_core::numfmt::sig;
use aisq_core::quantile::quantile_estimate;
use aisq_core::sa::{
    run_sa, write_trajectory_csv, LossMap, SaConfig, SaStatus, StepScaling, StepSchedule, TailField,
};
use aisq_core::{rng, EcdfKind, MeanShiftFamily, NormalizationMode, NormalizationSpec, Parameter, WeightedEcdf, WeightedSample};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::problem::{crude_samples, FirstCoordinate, Problem, Setup};
use crate::stats::mean_var;
use crate::BenchError;

const CRUDE_STREAM: u64 = 0;
const ADAPTIVE_STREAM: u64 = 1;
const FROZEN_STREAM: u64 = 2;
/// Level for the exceedance counts of the ECDF experiment.
pub const EXCEEDANCE_LEVEL: f64 = 0.999;

/// Outcome of one replication of `compare`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub index: usize,
    /// `F(λ)` over the loss grid, adaptive (right kind) and crude.
    pub cdf_ais: Vec<f64>,
    pub cdf_mc: Vec<f64>,
    /// Quantile estimates per configured `α`.
    pub quantile_ais: Vec<f64>,
    pub quantile_mc: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub truncations: u64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub loss_level: f64,
    pub mean_ais_pct: f64,
    pub mean_mc_pct: f64,
    pub var_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileRow {
    pub alpha: f64,
    pub mean_ais: f64,
    pub mean_mc: f64,
    pub var_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub quantiles: Vec<QuantileRow>,
    pub replications: Vec<ReplicationResult>,
    /// Replications that entered the table.
    pub used: usize,
    pub diverged: usize,
    pub q1: f64,
    pub q2: f64,
}

impl CompareReport {
    /// More than 1% of the replications diverged.
    pub fn divergence_warning(&self) -> bool {
        self.diverged * 100 > self.used + self.diverged
    }
}

fn install<T: Send>(cfg: &ExperimentConfig, job: impl FnOnce() -> T + Send) -> Result<T, BenchError> {
    match cfg.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| BenchError::ThreadPool(e.to_string()))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

fn sa_config(cfg: &ExperimentConfig, setup: &Setup, dim: usize) -> Result<SaConfig, BenchError> {
    Ok(SaConfig {
        scaling: StepScaling::Hessian { smoothing: cfg.smoothing },
        ..SaConfig::new(StepSchedule::new(setup.step_scale, cfg.schedule)?, Parameter::zeros(dim))
    })
}

/// The configured normalization; LIL mode evaluates tail probabilities at the
/// largest configured level.
fn normalization(cfg: &ExperimentConfig) -> NormalizationSpec {
    let defaults = NormalizationSpec::default();
    NormalizationSpec {
        mode: cfg.norm,
        eta: cfg.eta,
        nominal_alpha: cfg.alphas.iter().copied().reduce(f64::max).unwrap_or(defaults.nominal_alpha),
        ..defaults
    }
}

/// The estimator's samples: the adaptive stream, fresh draws at `θ̄` when
/// frozen, or reference draws when tuning is off.
struct AisOutput {
    samples: Vec<WeightedSample>,
    theta_bar: Vec<f64>,
    truncations: u64,
    diverged: bool,
}

fn ais_samples<F, L>(
    family: &F,
    loss: &L,
    setup: &Setup,
    cfg: &ExperimentConfig,
    rep_seed: u64,
) -> Result<AisOutput, BenchError>
where
    F: MeanShiftFamily,
    L: LossMap,
{
    let dim = family.param_dim();
    let draw_at = |theta: &Parameter, stream: u64| -> Result<Vec<WeightedSample>, BenchError> {
        let mut r = rng::stream(rep_seed, stream);
        (0..cfg.n)
            .map(|_| {
                let x = family.sample(theta, &mut r)?;
                let y = loss.loss(&x, &mut r);
                Ok(WeightedSample::new(y, family.likelihood_ratio(&x, theta)?))
            })
            .collect()
    };
    if !cfg.tune {
        return Ok(AisOutput {
            samples: draw_at(&Parameter::zeros(dim), ADAPTIVE_STREAM)?,
            theta_bar: vec![0.0; dim],
            truncations: 0,
            diverged: false,
        });
    }
    let field = TailField::new(family, loss, setup.spec);
    let run = run_sa(&field, &sa_config(cfg, setup, dim)?, cfg.n as u64, &mut rng::stream(rep_seed, ADAPTIVE_STREAM))?;
    let diverged = run.diagnostics.status == SaStatus::Diverged;
    let samples = if cfg.freeze && !diverged { draw_at(&run.averaged_theta, FROZEN_STREAM)? } else { run.samples };
    Ok(AisOutput {
        samples,
        theta_bar: run.averaged_theta.as_slice().to_vec(),
        truncations: run.diagnostics.truncations,
        diverged,
    })
}

/// Right-kind ECDF of the AIS samples under the configured normalization.
fn ais_ecdf(samples: &[WeightedSample], spec: &NormalizationSpec) -> Result<(WeightedEcdf, NormalizationSpec), BenchError> {
    let spec = plugin(samples, spec)?;
    Ok((WeightedEcdf::with_spec(samples, spec.nominal_alpha, EcdfKind::Right, &spec)?, spec))
}

fn plugin(samples: &[WeightedSample], spec: &NormalizationSpec) -> Result<NormalizationSpec, BenchError> {
    if spec.mode != NormalizationMode::Lil {
        return Ok(spec.clone());
    }
    let q_hat = quantile_estimate(samples, spec.nominal_alpha, EcdfKind::Right, &NormalizationSpec::identity())?;
    Ok(spec.clone().with_plugin_variances(samples, q_hat))
}

fn replicate<F, L>(family: &F, loss: &L, setup: &Setup, cfg: &ExperimentConfig, index: usize) -> Result<ReplicationResult, BenchError>
where
    F: MeanShiftFamily,
    L: LossMap,
{
    let rep_seed = rng::derive_seed(cfg.seed, index as u64);
    let ais = ais_samples(family, loss, setup, cfg, rep_seed)?;
    if ais.diverged {
        return Ok(ReplicationResult {
            index,
            cdf_ais: Vec::new(),
            cdf_mc: Vec::new(),
            quantile_ais: Vec::new(),
            quantile_mc: Vec::new(),
            theta_bar: ais.theta_bar,
            truncations: ais.truncations,
            diverged: true,
        });
    }
    let crude = crude_samples(family, loss, cfg.n, &mut rng::stream(rep_seed, CRUDE_STREAM))?;
    let spec = normalization(cfg);
    let (ecdf_ais, spec) = ais_ecdf(&ais.samples, &spec)?;
    let ecdf_mc = WeightedEcdf::new(&crude, EcdfKind::Right, crude.len() as f64)?;
    let cdf = |e: &WeightedEcdf| setup.loss_grid.iter().map(|&l| e.eval(l).clamp(0.0, 1.0)).collect();
    let quantiles = |s: &[WeightedSample], spec: &NormalizationSpec| -> Result<Vec<f64>, BenchError> {
        cfg.alphas.iter().map(|&a| Ok(quantile_estimate(s, a, EcdfKind::Right, spec)?)).collect()
    };
    Ok(ReplicationResult {
        index,
        cdf_ais: cdf(&ecdf_ais),
        cdf_mc: cdf(&ecdf_mc),
        quantile_ais: quantiles(&ais.samples, &spec)?,
        quantile_mc: quantiles(&crude, &NormalizationSpec::identity())?,
        theta_bar: ais.theta_bar,
        truncations: ais.truncations,
        diverged: false,
    })
}

fn replicate_all(setup: &Setup, cfg: &ExperimentConfig) -> Result<Vec<ReplicationResult>, BenchError> {
    let job = || -> Result<Vec<ReplicationResult>, BenchError> {
        (0..cfg.reps)
            .into_par_iter()
            .map(|r| match &setup.problem {
                Problem::Gauss1d { family } => replicate(family, &FirstCoordinate, setup, cfg, r),
                Problem::Credit { portfolio, family } => replicate(family, portfolio.as_ref(), setup, cfg, r),
            })
            .collect()
    };
    install(cfg, job)?
}

fn ratio(var_mc: f64, var_ais: f64) -> f64 {
    if var_ais > 0.0 {
        var_mc / var_ais
    } else if var_mc > 0.0 {
        f64::INFINITY
    } else {
        f64::NAN
    }
}

/// Runs the replications and aggregates the variance-ratio tables.
pub fn compare(cfg: &ExperimentConfig) -> Result<CompareReport, BenchError> {
    let setup = Setup::prepare(cfg)?;
    let replications = replicate_all(&setup, cfg)?;
    let used: Vec<&ReplicationResult> = replications.iter().filter(|r| !r.diverged).collect();
    let diverged = replications.len() - used.len();
    if used.is_empty() {
        return Err(BenchError::AllDiverged(replications.len()));
    }
    let column = |pick: &dyn Fn(&ReplicationResult) -> f64| -> (f64, f64) {
        mean_var(&used.iter().map(|r| pick(r)).collect::<Vec<_>>())
    };
    let rows = setup
        .loss_grid
        .iter()
        .enumerate()
        .map(|(j, &loss_level)| {
            let (m_ais, v_ais) = column(&|r| r.cdf_ais[j]);
            let (m_mc, v_mc) = column(&|r| r.cdf_mc[j]);
            CompareRow { loss_level, mean_ais_pct: 100.0 * m_ais, mean_mc_pct: 100.0 * m_mc, var_ratio: ratio(v_mc, v_ais) }
        })
        .collect();
    let quantiles = cfg
        .alphas
        .iter()
        .enumerate()
        .map(|(j, &alpha)| {
            let (m_ais, v_ais) = column(&|r| r.quantile_ais[j]);
            let (m_mc, v_mc) = column(&|r| r.quantile_mc[j]);
            QuantileRow { alpha, mean_ais: m_ais, mean_mc: m_mc, var_ratio: ratio(v_mc, v_ais) }
        })
        .collect();
    Ok(CompareReport {
        rows,
        quantiles,
        used: used.len(),
        diverged,
        replications,
        q1: setup.spec.q1,
        q2: setup.spec.q2,
    })
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, fs::File), BenchError> {
    fs::create_dir_all(dir).map_err(|source| BenchError::Io { path: dir.to_path_buf(), source })?;
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|source| BenchError::Io { path: path.clone(), source })?;
    Ok((path, file))
}

fn write_rows<W: io::Write>(out: W, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv(dir: &Path, name: &str, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<PathBuf, BenchError> {
    let (path, file) = create(dir, name)?;
    write_rows(io::BufWriter::new(file), header, rows).map_err(|source| BenchError::Csv { path: path.clone(), source })?;
    Ok(path)
}

/// `compare.csv` and `quantiles.csv` in the output directory.
pub fn write_compare(report: &CompareReport, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let table = write_csv(
        dir,
        "compare.csv",
        &["loss_level", "mean_ais_pct", "mean_mc_pct", "var_ratio"],
        report
            .rows
            .iter()
            .map(|r| vec![sig(r.loss_level, 6), sig(r.mean_ais_pct, 6), sig(r.mean_mc_pct, 6), sig(r.var_ratio, 6)]),
    )?;
    let quantiles = write_csv(
        dir,
        "quantiles.csv",
        &["alpha", "mean_ais", "mean_mc", "var_ratio"],
        report
            .quantiles
            .iter()
            .map(|r| vec![sig(r.alpha, 6), sig(r.mean_ais, 6), sig(r.mean_mc, 6), sig(r.var_ratio, 6)]),
    )?;
    Ok(vec![table, quantiles])
}

pub fn run_compare(cfg: &ExperimentConfig) -> Result<(CompareReport, Vec<PathBuf>), BenchError> {
    let report = compare(cfg)?;
    let paths = write_compare(&report, &cfg.out)?;
    Ok((report, paths))
}

/// One row of `trace.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub n: u64,
    pub theta: Vec<f64>,
    pub theta_bar: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TraceReport {
    pub rows: Vec<TraceRow>,
    pub final_theta: Vec<f64>,
    pub averaged_theta: Vec<f64>,
    pub status: SaStatus,
    pub truncations: u64,
    /// Increments `w_i 1{Y_i > q2} − μ` of the adaptive stream.
    pub martingale: MartingaleTrace,
    pub lil: LilReport,
    /// Centre `μ` of the increments: exact for the 1-D problem, otherwise the
    /// adaptive mean of the run.
    pub mu: f64,
    trajectory: Vec<aisq_core::sa::TrajectoryPoint>,
    band: LilBand,
}

fn trace_with<F, L>(family: &F, loss: &L, setup: &Setup, cfg: &ExperimentConfig, exact_mu: Option<f64>) -> Result<TraceReport, BenchError>
where
    F: MeanShiftFamily,
    L: LossMap,
{
    let dim = family.param_dim();
    let field = TailField::new(family, loss, setup.spec);
    let config = SaConfig { record_trajectory: true, ..sa_config(cfg, setup, dim)? };
    let rep_seed = rng::derive_seed(cfg.seed, 0);
    let run = run_sa(&field, &config, cfg.n as u64, &mut rng::stream(rep_seed, ADAPTIVE_STREAM))?;
    let trajectory = run.trajectory.clone().unwrap_or_default();

    // θ̄ as run_sa computes it, tracked along the way: the raw iterate until
    // the burn-in ends, the average of accepted iterates afterwards.
    let burn_in = (cfg.n as f64 * config.burn_in_fraction).floor() as u64;
    let mut sum = vec![0.0; dim];
    let mut count = 0u64;
    let rows = trajectory
        .iter()
        .map(|p| {
            if p.accepted && p.n > burn_in {
                sum.iter_mut().zip(&p.theta).for_each(|(s, t)| *s += t);
                count += 1;
            }
            let theta_bar = if count == 0 { p.theta.clone() } else { sum.iter().map(|s| s / count as f64).collect() };
            TraceRow { n: p.n, theta: p.theta.clone(), theta_bar }
        })
        .collect();

    let q2 = field.spec().q2;
    let hits = |s: &WeightedSample| if s.y > q2 { s.w } else { 0.0 };
    let mu = exact_mu.unwrap_or_else(|| run.samples.iter().map(hits).sum::<f64>() / run.samples.len() as f64);
    let mut martingale = MartingaleTrace::with_history();
    for s in &run.samples {
        martingale.accumulate(hits(s) - mu, None);
    }
    let band = LilBand { eta: cfg.eta };
    let history = martingale.weighted_history(WeightingSequence::TotalQv).unwrap_or_default();
    let lil = lil_check(&history, &band, 100.min(history.len().max(3)))
        .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    Ok(TraceReport {
        rows,
        final_theta: run.final_theta.as_slice().to_vec(),
        averaged_theta: run.averaged_theta.as_slice().to_vec(),
        status: run.diagnostics.status,
        truncations: run.diagnostics.truncations,
        martingale,
        lil,
        mu,
        trajectory,
        band,
    })
}

/// Runs one adaptive chain (replication 0).
pub fn trace(cfg: &ExperimentConfig) -> Result<TraceReport, BenchError> {
    let setup = Setup::prepare(cfg)?;
    let job = || match &setup.problem {
        Problem::Gauss1d { family } => trace_with(family, &FirstCoordinate, &setup, cfg, Some(normal::sf(setup.spec.q2))),
        Problem::Credit { portfolio, family } => trace_with(family, portfolio.as_ref(), &setup, cfg, None),
    };
    install(cfg, job)?
}

/// `trace.csv` (`n`, raw and averaged coordinates), `trajectory.csv`
/// (truncation counters) and `martingale.csv` (LIL diagnostics).
pub fn write_trace(report: &TraceReport, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let dim = report.final_theta.len();
    let mut header: Vec<String> = vec!["n".into()];
    header.extend((0..dim).map(|i| format!("theta_{i}")));
    header.extend((0..dim).map(|i| format!("theta_bar_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let trace = write_csv(
        dir,
        "trace.csv",
        &header,
        report.rows.iter().map(|r| {
            let mut rec = vec![r.n.to_string()];
            rec.extend(r.theta.iter().chain(&r.theta_bar).map(|v| sig(*v, 6)));
            rec
        }),
    )?;

    let (traj_path, file) = create(dir, "trajectory.csv")?;
    write_trajectory_csv(&report.trajectory, dim, io::BufWriter::new(file))
        .map_err(|source| BenchError::Csv { path: traj_path.clone(), source })?;

    let (mart_path, file) = create(dir, "martingale.csv")?;
    report
        .martingale
        .write_csv(&report.band, WeightingSequence::TotalQv, io::BufWriter::new(file))
        .map_err(|source| BenchError::Csv { path: mart_path.clone(), source })?;
    Ok(vec![trace, traj_path, mart_path])
}

pub fn run_trace(cfg: &ExperimentConfig) -> Result<(TraceReport, Vec<PathBuf>), BenchError> {
    let report = trace(cfg)?;
    let paths = write_trace(&report, &cfg.out)?;
    Ok((report, paths))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcdfRow {
    pub loss_level: f64,
    pub ecdf_ais: f64,
    pub ecdf_mc: f64,
    /// Standard errors of the two estimates.
    pub se_ais: f64,
    pub se_mc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcdfReport {
    pub rows: Vec<EcdfRow>,
    /// Crude estimate of the quantile at [`EXCEEDANCE_LEVEL`].
    pub crude_quantile: f64,
    /// Samples beyond the crude quantile.
    pub exceed_ais: usize,
    pub exceed_mc: usize,
}

fn tail_se(samples: &[WeightedSample], level: f64) -> f64 {
    let xs: Vec<f64> = samples.iter().map(|s| if s.y > level { s.w } else { 0.0 }).collect();
    (mean_var(&xs).1 / xs.len() as f64).sqrt()
}

fn ecdf_with<F, L>(family: &F, loss: &L, setup: &Setup, cfg: &ExperimentConfig) -> Result<EcdfReport, BenchError>
where
    F: MeanShiftFamily,
    L: LossMap,
{
    let rep_seed = rng::derive_seed(cfg.seed, 0);
    let ais = ais_samples(family, loss, setup, cfg, rep_seed)?;
    if ais.diverged {
        return Err(BenchError::AllDiverged(1));
    }
    let crude = crude_samples(family, loss, cfg.n, &mut rng::stream(rep_seed, CRUDE_STREAM))?;
    let (ecdf_ais, _) = ais_ecdf(&ais.samples, &normalization(cfg))?;
    let ecdf_mc = WeightedEcdf::new(&crude, EcdfKind::Right, crude.len() as f64)?;
    let rows = setup
        .loss_grid
        .iter()
        .map(|&l| EcdfRow {
            loss_level: l,
            ecdf_ais: ecdf_ais.eval(l).clamp(0.0, 1.0),
            ecdf_mc: ecdf_mc.eval(l),
            se_ais: tail_se(&ais.samples, l),
            se_mc: tail_se(&crude, l),
        })
        .collect();
    let crude_quantile = ecdf_mc.generalized_inverse(EXCEEDANCE_LEVEL)?;
    let count = |s: &[WeightedSample]| s.iter().filter(|s| s.y > crude_quantile).count();
    Ok(EcdfReport { rows, crude_quantile, exceed_ais: count(&ais.samples), exceed_mc: count(&crude) })
}

/// Adaptive and crude tail ECDFs over the loss grid from one replication.
pub fn ecdf(cfg: &ExperimentConfig) -> Result<EcdfReport, BenchError> {
    let setup = Setup::prepare(cfg)?;
    let job = || match &setup.problem {
        Problem::Gauss1d { family } => ecdf_with(family, &FirstCoordinate, &setup, cfg),
        Problem::Credit { portfolio, family } => ecdf_with(family, portfolio.as_ref(), &setup, cfg),
    };
    install(cfg, job)?
}

/// `ecdf.csv` and `exceedances.csv`.
pub fn write_ecdf(report: &EcdfReport, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let table = write_csv(
        dir,
        "ecdf.csv",
        &["loss_level", "ecdf_ais", "ecdf_mc", "se_ais", "se_mc"],
        report
            .rows
            .iter()
            .map(|r| vec![sig(r.loss_level, 6), sig(r.ecdf_ais, 6), sig(r.ecdf_mc, 6), sig(r.se_ais, 6), sig(r.se_mc, 6)]),
    )?;
    let exceed = write_csv(
        dir,
        "exceedances.csv",
        &["alpha", "crude_quantile", "exceed_ais", "exceed_mc"],
        std::iter::once(vec![
            sig(EXCEEDANCE_LEVEL, 6),
            sig(report.crude_quantile, 6),
            report.exceed_ais.to_string(),
            report.exceed_mc.to_string(),
        ]),
    )?;
    Ok(vec![table, exceed])
}

pub fn run_ecdf(cfg: &ExperimentConfig) -> Result<(EcdfReport, Vec<PathBuf>), BenchError> {
    let report = ecdf(cfg)?;
    let paths = write_ecdf(&report, &cfg.out)?;
    Ok((report, paths))
}
