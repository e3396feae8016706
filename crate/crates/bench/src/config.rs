//! Experiment configuration: flat `key = value` files plus overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use aisq_core::credit::SyntheticSpec;
use aisq_core::sa::StepMode;
use aisq_core::NormalizationMode;

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    /// Standard normal loss with thresholds in the far right tail.
    Gauss1d,
    /// Gaussian-copula credit portfolio.
    Credit,
}

impl FromStr for ProblemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gauss1d" => Ok(Self::Gauss1d),
            "credit" => Ok(Self::Credit),
            other => Err(format!("unknown problem `{other}` (expected gauss1d or credit)")),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gauss1d => "gauss1d",
            Self::Credit => "credit",
        })
    }
}

/// Parses `lo:hi:step` into `lo, lo+step, ..., ≤ hi`. An empty string or
/// `none` gives an empty grid.
pub fn parse_loss_grid(s: &str) -> Result<Vec<f64>, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(format!("loss grid `{s}` must look like lo:hi:step"));
    };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("loss grid `{s}`: `{t}`: {e}"));
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !(lo.is_finite() && hi.is_finite() && step > 0.0 && step.is_finite()) {
        return Err(format!("loss grid `{s}` needs finite bounds and a positive step"));
    }
    if hi < lo {
        return Ok(Vec::new());
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    // Round away the accumulated representation error so that e.g. 2.09 + 2·0.5
    // prints and compares as 3.09.
    Ok((0..count)
        .map(|i| {
            let v = lo + i as f64 * step;
            format!("{v:.12e}").parse().unwrap_or(v)
        })
        .collect())
}

/// Everything one benchmark invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    /// Obligor CSV; without it a synthetic portfolio is generated.
    pub portfolio: Option<PathBuf>,
    pub sectors: Option<PathBuf>,
    /// Number of principal components the credit parameter is reduced to.
    pub reduce: usize,
    pub alphas: Vec<f64>,
    /// `None` selects the problem's default grid.
    pub loss_grid: Option<Vec<f64>>,
    pub n: usize,
    pub reps: usize,
    /// Thresholds; unset values come from the problem defaults or the pilot run.
    pub q1: Option<f64>,
    pub q2: Option<f64>,
    pub norm: NormalizationMode,
    pub eta: f64,
    pub schedule: StepMode,
    /// Step scale; unset selects the problem default.
    pub a: Option<f64>,
    /// Rate floor of the running gradient and curvature averages.
    pub smoothing: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    /// Estimate from fresh draws at the averaged parameter instead of the
    /// adaptive stream.
    pub freeze: bool,
    /// With tuning off the sampler stays at the reference parameter.
    pub tune: bool,
    pub pilot_n: usize,
    pub synthetic: SyntheticSpec,
    pub portfolio_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKind::Gauss1d,
            portfolio: None,
            sectors: None,
            reduce: 2,
            alphas: vec![0.999],
            loss_grid: None,
            n: 10_000,
            reps: 1000,
            q1: None,
            q2: None,
            norm: NormalizationMode::Identity,
            eta: 0.1,
            schedule: StepMode::Polyak,
            a: None,
            smoothing: 0.1,
            seed: 20_080_101,
            out: PathBuf::from("out"),
            threads: None,
            freeze: false,
            tune: true,
            pilot_n: 10_000,
            synthetic: SyntheticSpec::default(),
            portfolio_seed: 7,
        }
    }
}

/// Keys accepted in config files; the CLI maps its flags onto the same names.
pub const KEYS: &[&str] = &[
    "problem",
    "portfolio",
    "sectors",
    "reduce",
    "alpha",
    "loss_grid",
    "n",
    "reps",
    "q1",
    "q2",
    "norm",
    "eta",
    "schedule",
    "a",
    "smoothing",
    "seed",
    "out",
    "threads",
    "freeze",
    "tune",
    "pilot_n",
    "obligors",
    "sector_count",
    "correlation",
    "cross_correlation",
    "pd_min",
    "pd_max",
    "loading_min",
    "loading_max",
    "portfolio_seed",
];

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::default();
        cfg.apply_ini(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies `key = value` lines. `#` and `;` start comments; `[section]`
    /// headers are ignored.
    pub fn apply_ini(&mut self, text: &str, origin: &str) -> Result<(), BenchError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let located = |message: String| BenchError::Config { origin: origin.to_string(), line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| located(format!("expected `key = value`, found `{line}`")))?;
            self.set(key.trim(), value.trim()).map_err(located)?;
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{key} = `{v}`: {e}"))
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "problem" => self.problem = parse(key, value)?,
            "portfolio" => self.portfolio = path(value),
            "sectors" => self.sectors = path(value),
            "reduce" => self.reduce = parse(key, value)?,
            "alpha" => {
                self.alphas = value
                    .split(',')
                    .filter(|t| !t.trim().is_empty())
                    .map(|t| parse(key, t.trim()))
                    .collect::<Result<_, _>>()?
            }
            "loss_grid" => self.loss_grid = Some(parse_loss_grid(value)?),
            "n" => self.n = parse(key, value)?,
            "reps" => self.reps = parse(key, value)?,
            "q1" => self.q1 = Some(parse(key, value)?),
            "q2" => self.q2 = Some(parse(key, value)?),
            "norm" => self.norm = value.parse().map_err(|e| format!("{e}"))?,
            "eta" => self.eta = parse(key, value)?,
            "schedule" => self.schedule = value.parse().map_err(|e| format!("{e}"))?,
            "a" => self.a = Some(parse(key, value)?),
            "smoothing" => self.smoothing = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "threads" => self.threads = Some(parse(key, value)?),
            "freeze" => self.freeze = parse(key, value)?,
            "tune" => self.tune = parse(key, value)?,
            "pilot_n" => self.pilot_n = parse(key, value)?,
            "obligors" => self.synthetic.m = parse(key, value)?,
            "sector_count" => self.synthetic.k = parse(key, value)?,
            "correlation" => self.synthetic.correlation = parse(key, value)?,
            "cross_correlation" => self.synthetic.cross_correlation = parse(key, value)?,
            "pd_min" => self.synthetic.pd_range.0 = parse(key, value)?,
            "pd_max" => self.synthetic.pd_range.1 = parse(key, value)?,
            "loading_min" => self.synthetic.loading_range.0 = parse(key, value)?,
            "loading_max" => self.synthetic.loading_range.1 = parse(key, value)?,
            "portfolio_seed" => self.portfolio_seed = parse(key, value)?,
            other => return Err(format!("unknown key `{other}` (known: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidConfig(m));
        if self.n == 0 || self.reps == 0 || self.pilot_n == 0 || self.reduce == 0 {
            return bad("n, reps, pilot_n and reduce must be at least 1".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return bad(format!("alpha {a} outside (0, 1)"));
        }
        if let (Some(q1), Some(q2)) = (self.q1, self.q2) {
            if !(q1 < q2) {
                return bad(format!("need q1 < q2, got q1 = {q1}, q2 = {q2}"));
            }
        }
        if let Some(grid) = &self.loss_grid {
            if grid.windows(2).any(|w| !(w[0] < w[1])) {
                return bad("loss grid must be strictly increasing".into());
            }
        }
        if !(self.a.unwrap_or(1.0) > 0.0 && self.eta > 0.0) {
            return bad("a and eta must be positive".into());
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return bad(format!("smoothing {} outside (0, 1]", self.smoothing));
        }
        if self.portfolio.is_some() != self.sectors.is_some() {
            return bad("portfolio and sectors files must be given together".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid() {
        assert_eq!(parse_loss_grid("2.09:4.09:0.5").unwrap(), vec![2.09, 2.59, 3.09, 3.59, 4.09]);
        assert_eq!(parse_loss_grid("0.1:0.13:0.01").unwrap(), vec![0.1, 0.11, 0.12, 0.13]);
        assert_eq!(parse_loss_grid("3.09:3.09:1").unwrap(), vec![3.09]);
        assert!(parse_loss_grid("").unwrap().is_empty());
        assert!(parse_loss_grid("1:0:0.1").unwrap().is_empty());
        assert!(parse_loss_grid("1:2").is_err());
        assert!(parse_loss_grid("1:2:0").is_err());
    }

    #[test]
    fn ini_and_overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_ini("# demo\n[run]\nproblem = credit\nalpha = 0.99, 0.999\nreps=50 ; short\nfreeze = true\n", "c.ini")
            .unwrap();
        assert_eq!(cfg.problem, ProblemKind::Credit);
        assert_eq!(cfg.alphas, vec![0.99, 0.999]);
        assert_eq!(cfg.reps, 50);
        assert!(cfg.freeze);
        cfg.set("reps", "7").unwrap();
        assert_eq!(cfg.reps, 7);
        let err = cfg.apply_ini("n = 10\nbogus = 1\n", "c.ini").unwrap_err().to_string();
        assert!(err.contains("c.ini: line 2") && err.contains("bogus"), "{err}");
        let err = cfg.apply_ini("n 10\n", "c.ini").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn validation() {
        let ok = ExperimentConfig::default();
        assert!(ok.validate().is_ok());
        assert!(ExperimentConfig { n: 0, ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { q1: Some(2.0), q2: Some(1.0), ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { loss_grid: Some(vec![2.0, 1.0]), ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { alphas: vec![1.0], ..ok }.validate().is_err());
    }
}
