//! Command-line front end. Every subcommand reads one [`RunConfig`],
//! writes its artifacts plus `config.resolved.toml` to the output
//! directory and never embeds timestamps, so reruns are byte-identical.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "flowmatch", version, about = "Complete two partially overlapping cytometry files by cluster-restricted hot-deck imputation")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set em.tol=1e-8`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (`output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Top-level seed (`seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (`output.threads`).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Draw a labeled synthetic data set.
    Simulate,
    /// Cut a complete table into two files and a holdout set.
    Split,
    /// Per-marker histograms and detected expression levels.
    Histogram,
    /// Fit the mixture on the stacked files.
    Fit,
    /// Impute both files, optionally restricted by a fitted model.
    Impute,
    /// Fit, impute and (with truth and holdout) score in one run.
    Match,
    /// Repeated splits scored with both methods.
    Evaluate,
}

impl Cli {
    /// Configuration with the flag shorthands folded into the overrides;
    /// explicit `--set` entries come last and win.
    pub fn resolve_config(&self) -> Result<RunConfig, Error> {
        let mut overrides = Vec::new();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(t) = self.threads {
            overrides.push(format!("output.threads={t}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("output.dir={}", toml::Value::String(o.display().to_string())));
        }
        overrides.extend(self.overrides.iter().cloned());
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

/// Runs `command` inside a pool sized by the configuration.
pub fn run(command: Command, cfg: &RunConfig) -> Result<(), Error> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads() {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Simulate => commands::simulate(cfg),
        Command::Split => commands::split(cfg),
        Command::Histogram => commands::histogram(cfg),
        Command::Fit => commands::fit(cfg),
        Command::Impute => commands::impute(cfg),
        Command::Match => commands::run_match(cfg),
        Command::Evaluate => commands::evaluate(cfg),
    })
}
