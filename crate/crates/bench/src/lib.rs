//! Benchmark harness comparing crude Monte Carlo with adaptive importance
//! sampling on a 1-D Gaussian tail and a credit portfolio.

pub mod checks;
pub mod config;
pub mod problem;
pub mod runner;
pub mod selftest;
pub mod stats;

use std::path::PathBuf;

use aisq_core::credit::CreditError;
use aisq_core::density::DensityError;
use aisq_core::quantile::QuantileError;
use aisq_core::sa::SaError;
use thiserror::Error;

pub use config::{ExperimentConfig, ProblemKind};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{origin}: line {line}: {message}")]
    Config { origin: String, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("writing {}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("all {0} replications diverged")]
    AllDiverged(usize),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Sa(#[from] SaError),
    #[error(transparent)]
    Quantile(#[from] QuantileError),
}
