//! Run configuration: one TOML document, with command-line overrides
//! applied as dotted-key assignments before deserialization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::FilePattern;
use crate::em::FitOptions;
use crate::eval::synthetic::{PanelSpec, ToySpec};
use crate::impute::{ImputeOptions, Method};
use crate::panel::{PanelConfig, DEFAULT_BINS, DEFAULT_SMOOTHING};
use crate::Error;

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "FLOWMATCH_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Default for every seed left unset below.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub input: InputConfig,
    pub pattern: Option<FilePattern>,
    pub panel: Option<PanelConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub impute: ImputeConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub histogram: HistogramConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Fully observed table for `split`, `histogram` and `evaluate`.
    pub source: Option<PathBuf>,
    pub file1: Option<PathBuf>,
    pub file2: Option<PathBuf>,
    /// Ground truth behind file 1 and file 2, and the holdout rows; all
    /// three enable KL scoring in `match`.
    pub truth1: Option<PathBuf>,
    pub truth2: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
    /// Fitted model for `impute`.
    pub model: Option<PathBuf>,
    pub missing_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Explicit initial means (one per component, in panel marker order
    /// when a panel is given, else in data column order). Overrides the
    /// panel-derived means and sets K.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { latent_dim: 2, means: None, init_seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for EmConfig {
    fn default() -> Self {
        let d = FitOptions::default();
        Self { tol: d.tol, max_iter: d.max_iter, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    pub method: Method,
    pub standardize: bool,
    pub spatial_index: bool,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        let d = ImputeOptions::default();
        Self { method: Method::ClusterNn, standardize: d.standardize, spatial_index: d.spatial_index }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n1: usize,
    pub n2: usize,
    pub n_eval: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub bins: usize,
    pub smoothing: usize,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS, smoothing: DEFAULT_SMOOTHING }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub repetitions: usize,
    /// Replicate r splits with seed `first_seed + r`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_seed: Option<u64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { repetitions: 10, first_seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Toy,
    Panel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub generator: Generator,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub toy: ToySpec,
    pub panel: PanelSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { generator: Generator::Panel, n: 25_000, seed: None, toy: ToySpec::default(), panel: PanelSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Decimal places in written tables; shortest round-trip when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), precision: None, threads: None }
    }
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`section.key=value`, value in
    /// TOML syntax, bare words taken as strings) and validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, Error> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn validate(&self) -> Result<(), Error> {
        if self.model.latent_dim == 0 {
            return Err(Error::Config("model.latent_dim must be at least 1".into()));
        }
        if !(self.em.tol > 0.0) {
            return Err(Error::Config("em.tol must be positive".into()));
        }
        if self.histogram.bins < 8 {
            return Err(Error::Config("histogram.bins must be at least 8".into()));
        }
        if self.evaluate.repetitions == 0 {
            return Err(Error::Config("evaluate.repetitions must be at least 1".into()));
        }
        if self.output.threads == Some(0) {
            return Err(Error::Config("output.threads must be at least 1".into()));
        }
        if let (Some(panel), Some(means)) = (&self.panel, &self.model.means) {
            if means.iter().any(|m| m.len() != panel.markers().len()) {
                return Err(Error::Config("model.means must match the panel marker count".into()));
            }
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        self.model.init_seed.unwrap_or(self.seed)
    }

    pub fn em_seed(&self) -> u64 {
        self.em.seed.unwrap_or(self.seed)
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    pub fn evaluate_first_seed(&self) -> u64 {
        self.evaluate.first_seed.unwrap_or(self.seed)
    }

    pub fn simulate_seed(&self) -> u64 {
        self.simulate.seed.unwrap_or(self.seed)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions { tol: self.em.tol, max_iter: self.em.max_iter, seed: self.em_seed() }
    }

    pub fn impute_options(&self) -> ImputeOptions {
        ImputeOptions { standardize: self.impute.standardize, spatial_index: self.impute.spatial_index }
    }

    pub fn pattern(&self) -> Result<&FilePattern, Error> {
        self.pattern.as_ref().ok_or_else(|| Error::Config("a [pattern] section is required".into()))
    }

    /// Worker count: `output.threads`, else the environment, else rayon's
    /// default.
    pub fn threads(&self) -> Option<usize> {
        self.output.threads.or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0))
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), Error> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

/// Panel used when a configuration names none: the six-type lymph-node
/// panel.
pub fn default_panel() -> PanelConfig {
    PanelConfig::lymph_node()
}
