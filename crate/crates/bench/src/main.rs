use std::path::PathBuf;
use std::process::ExitCode;

use aisq_bench::runner::{run_compare, run_ecdf, run_trace};
use aisq_bench::selftest::{selftest, OracleConstants};
use aisq_bench::ExperimentConfig;
use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

/// Crude Monte Carlo vs. adaptive importance sampling for tail quantiles.
#[derive(Parser, Debug)]
#[command(name = "aisq", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Replicated crude vs. AIS runs: variance ratios per loss level and quantile level.
    Compare(ExperimentArgs),
    /// One AIS chain: raw and averaged parameter trajectory plus martingale diagnostics.
    Trace(ExperimentArgs),
    /// Tail ECDFs of one crude and one AIS run over the loss grid.
    Ecdf(ExperimentArgs),
    /// Fast oracle and property checks.
    Selftest {
        /// Perturb a stored oracle constant (the run is then expected to fail).
        #[arg(long, hide = true, value_name = "NAME")]
        corrupt: Option<String>,
    },
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Config file with `key = value` lines; flags override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_parser = ["gauss1d", "credit"])]
    problem: Option<String>,
    /// Obligor CSV (credit); requires --sectors.
    #[arg(long, value_name = "PATH")]
    portfolio: Option<PathBuf>,
    /// Sector model file (credit).
    #[arg(long, value_name = "PATH")]
    sectors: Option<PathBuf>,
    /// Samples per run.
    #[arg(long)]
    n: Option<usize>,
    /// Replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Quantile level; repeat for several.
    #[arg(long)]
    alpha: Vec<f64>,
    /// Loss levels as lo:hi:step.
    #[arg(long, value_name = "LO:HI:STEP")]
    loss_grid: Option<String>,
    #[arg(long)]
    q1: Option<f64>,
    #[arg(long)]
    q2: Option<f64>,
    #[arg(long, value_parser = ["identity", "lil", "ft"])]
    norm: Option<String>,
    /// Slack on the LIL envelope.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_parser = ["classic", "polyak"])]
    schedule: Option<String>,
    /// Step scale (default 1 for gauss1d, 3 for credit).
    #[arg(long)]
    a: Option<f64>,
    /// Rate floor of the running gradient and curvature averages.
    #[arg(long)]
    smoothing: Option<f64>,
    /// Principal components kept for the credit parameter.
    #[arg(long, value_name = "L")]
    reduce: Option<usize>,
    /// Estimate from fresh draws at the averaged parameter instead of the adaptive stream.
    #[arg(long)]
    freeze: bool,
    /// Keep the sampler at the reference parameter (AIS degenerates to crude MC).
    #[arg(long)]
    no_tune: bool,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, env = "AISQ_THREADS", value_name = "N")]
    threads: Option<usize>,
}

impl ExperimentArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let mut overrides: Vec<(&str, String)> = Vec::new();
        let mut put = |key, value: Option<String>| {
            if let Some(v) = value {
                overrides.push((key, v));
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("problem", self.problem);
        put("portfolio", self.portfolio.map(|p| p.display().to_string()));
        put("sectors", self.sectors.map(|p| p.display().to_string()));
        put("n", self.n.map(|v| v.to_string()));
        put("reps", self.reps.map(|v| v.to_string()));
        put("loss_grid", self.loss_grid);
        put("q1", self.q1.map(|v| v.to_string()));
        put("q2", self.q2.map(|v| v.to_string()));
        put("norm", self.norm);
        put("eta", self.eta.map(|v| v.to_string()));
        put("schedule", self.schedule);
        put("a", self.a.map(|v| v.to_string()));
        put("smoothing", self.smoothing.map(|v| v.to_string()));
        put("reduce", self.reduce.map(|v| v.to_string()));
        put("out", self.out.map(|p| p.display().to_string()));
        put("threads", self.threads.map(|v| v.to_string()));
        if !self.alpha.is_empty() {
            let list: Vec<String> = self.alpha.iter().map(f64::to_string).collect();
            put("alpha", Some(list.join(",")));
        }
        if self.freeze {
            put("freeze", Some("true".into()));
        }
        if self.no_tune {
            put("tune", Some("false".into()));
        }
        for (key, value) in overrides {
            cfg.set(key, &value).map_err(|e| anyhow!("--{}: {e}", key.replace('_', "-")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report_paths(paths: &[PathBuf]) {
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Compare(args) => {
            let cfg = args.into_config()?;
            let (report, paths) = run_compare(&cfg).context("compare failed")?;
            eprintln!(
                "q1 = {}, q2 = {}; {} replications used, {} diverged",
                report.q1, report.q2, report.used, report.diverged
            );
            if report.divergence_warning() {
                eprintln!("warning: more than 1% of the replications diverged and were excluded");
            }
            report_paths(&paths);
        }
        Command::Trace(args) => {
            let cfg = args.into_config()?;
            let (report, paths) = run_trace(&cfg).context("trace failed")?;
            eprintln!(
                "status {}, {} truncations, final θ = {:?}, averaged θ = {:?}",
                report.status, report.truncations, report.final_theta, report.averaged_theta
            );
            eprintln!(
                "LIL band: {:.4} of steps inside, sup ratio {:.3}, last-decade ratio {:.3} (finite-n proxy)",
                report.lil.fraction_within, report.lil.sup_ratio, report.lil.limsup_estimate
            );
            report_paths(&paths);
        }
        Command::Ecdf(args) => {
            let cfg = args.into_config()?;
            let (report, paths) = run_ecdf(&cfg).context("ecdf failed")?;
            eprintln!(
                "beyond the crude 99.9% quantile {}: {} AIS samples, {} crude samples",
                report.crude_quantile, report.exceed_ais, report.exceed_mc
            );
            report_paths(&paths);
        }
        Command::Selftest { corrupt } => {
            let mut constants = OracleConstants::default();
            if let Some(name) = corrupt {
                constants.corrupt(&name).map_err(|e| anyhow!(e))?;
            }
            let report = selftest(&constants);
            println!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
