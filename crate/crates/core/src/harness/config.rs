//! Run configuration, parsed from TOML. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::{LocalConfig, LocalOptimizer};
use crate::error::{Error, Result};
use crate::gsi::AdaptMode;
use crate::models::{ModelKind, ModelSpec};
use crate::sampling::SamplingStrategy;
use crate::server::{ServerConfig, ServerOptimizer};

/// Environment variable that relocates relative IDX paths.
pub const DATA_DIR_ENV: &str = "FEDGLAD_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synth {
        n_train: usize,
        n_test: usize,
        dim: usize,
        classes: usize,
        spread: f64,
        /// Fixes the generated data across run seeds when set.
        #[serde(default)]
        seed: Option<u64>,
    },
    MnistIdx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, num_classes: usize, init_seed: u64) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes,
            init_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Fedavg,
    Fedprox,
    Fedavgm,
    Fedadam,
    Scaffold,
}

impl Algorithm {
    /// The server optimizer each algorithm runs on.
    pub fn server_optimizer(self) -> ServerOptimizer {
        match self {
            Algorithm::Fedavg | Algorithm::Fedprox | Algorithm::Scaffold => ServerOptimizer::Sgd,
            Algorithm::Fedavgm => ServerOptimizer::Sgdm,
            Algorithm::Fedadam => ServerOptimizer::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedGladConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_mode")]
    pub mode: AdaptMode,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_mode() -> AdaptMode {
    AdaptMode::Groupwise
}

fn default_beta() -> f64 {
    0.9
}

fn default_gamma() -> f64 {
    0.02
}

impl Default for FedGladConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            mode: default_mode(),
            beta: default_beta(),
            gamma: default_gamma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_strategy")]
    pub strategy: SamplingStrategy,
    #[serde(default = "default_adafl_alpha")]
    pub adafl_alpha: f64,
    /// Scenario file holding a `[schedule]` table of round -> client ids.
    #[serde(default)]
    pub schedule_file: Option<PathBuf>,
    /// Inline schedule; keys are round numbers.
    #[serde(default)]
    pub schedule: BTreeMap<String, Vec<usize>>,
}

fn default_strategy() -> SamplingStrategy {
    SamplingStrategy::Uniform
}

fn default_adafl_alpha() -> f64 {
    0.5
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            adafl_alpha: default_adafl_alpha(),
            schedule_file: None,
            schedule: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Trains all clients every round to get the full-participation gradient.
    #[serde(default)]
    pub oracle_mode: bool,
    #[serde(default)]
    pub sim_score: bool,
    #[serde(default)]
    pub scale_ratio: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "default_standardize")]
    pub standardize: bool,
    pub model: ModelConfig,
    pub n_clients: usize,
    pub sample_count: usize,
    pub rounds: usize,
    pub alpha: f64,
    pub local: LocalConfig,
    pub server: ServerConfig,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub fedglad: FedGladConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for local training; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_standardize() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_eval_every() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    schedule: BTreeMap<String, Vec<usize>>,
}

/// Parses a scenario file: a `[schedule]` table mapping rounds to client ids.
pub fn parse_schedule(text: &str) -> Result<BTreeMap<usize, Vec<usize>>> {
    let file: ScheduleFile = toml::from_str(text).map_err(|e| toml_error("schedule", e))?;
    schedule_keys(&file.schedule)
}

fn schedule_keys(raw: &BTreeMap<String, Vec<usize>>) -> Result<BTreeMap<usize, Vec<usize>>> {
    raw.iter()
        .map(|(k, ids)| {
            k.parse::<usize>()
                .map(|round| (round, ids.clone()))
                .map_err(|_| Error::config(format!("schedule.{k}"), "round keys must be integers"))
        })
        .collect()
}

fn toml_error(context: &str, e: toml::de::Error) -> Error {
    let path = e
        .span()
        .map(|s| format!("{context} (bytes {}..{})", s.start, s.end))
        .unwrap_or_else(|| context.to_string());
    Error::config(path, e.message().to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| toml_error("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_value(value: toml::Value) -> Result<Self> {
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| toml_error("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `schedule_file` is resolved against
    /// the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_relative_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_relative_paths(&mut self, base: &Path) {
        if let Some(f) = &self.sampler.schedule_file {
            if f.is_relative() {
                self.sampler.schedule_file = Some(base.join(f));
            }
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn server_config(&self) -> ServerConfig {
        self.server.clone()
    }

    /// Forced-round schedule from the inline table and the scenario file.
    pub fn schedule(&self) -> Result<BTreeMap<usize, Vec<usize>>> {
        let mut out = schedule_keys(&self.sampler.schedule)?;
        if let Some(path) = &self.sampler.schedule_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("sampler.schedule_file", format!("{}: {e}", path.display())))?;
            out.extend(parse_schedule(&text)?);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |p: &str, m: &str| Err(Error::config(p, m));
        match &self.dataset {
            DatasetConfig::Synth { n_train, n_test, dim, classes, spread, .. } => {
                if *classes < 2 {
                    return err("dataset.classes", "need at least 2 classes");
                }
                if *dim == 0 {
                    return err("dataset.dim", "must be positive");
                }
                if n_train < classes || *n_test == 0 {
                    return err("dataset.n_train", "need n_train >= classes and n_test >= 1");
                }
                if !(*spread >= 0.0) {
                    return err("dataset.spread", "must be non-negative");
                }
            }
            DatasetConfig::MnistIdx { .. } => {}
        }
        match (self.model.kind, self.model.hidden_dims.len()) {
            (ModelKind::Logreg, 0) | (ModelKind::Mlp, 1 | 2) => {}
            _ => return err("model.hidden_dims", "logreg takes none, mlp takes one or two"),
        }
        if self.n_clients == 0 {
            return err("n_clients", "must be positive");
        }
        if self.sample_count == 0 {
            return err("sample_count", "must be positive");
        }
        if self.sample_count > self.n_clients && self.sampler.strategy != SamplingStrategy::Md {
            return err("sample_count", "cannot exceed n_clients without replacement");
        }
        if !(self.alpha > 0.0) {
            return err("alpha", "must be positive");
        }
        if self.seeds.is_empty() {
            return err("seeds", "need at least one seed");
        }
        if self.eval_every == 0 {
            return err("eval_every", "must be at least 1");
        }
        self.local.validate()?;
        self.server.validate()?;
        if self.server.optimizer != self.algorithm.server_optimizer() {
            return err(
                "server.optimizer",
                &format!(
                    "{:?} runs on the {:?} server optimizer",
                    self.algorithm,
                    self.algorithm.server_optimizer()
                ),
            );
        }
        if self.local.prox_mu > 0.0 && self.algorithm != Algorithm::Fedprox {
            return err("local.prox_mu", "the proximal term is only used by fedprox");
        }
        if self.algorithm == Algorithm::Scaffold && self.local.optimizer != LocalOptimizer::Sgd {
            return err("local.optimizer", "scaffold requires the sgd local optimizer");
        }
        if !(0.0..1.0).contains(&self.fedglad.beta) {
            return err("fedglad.beta", "must be in [0, 1)");
        }
        if !(self.fedglad.gamma >= 0.0) {
            return err("fedglad.gamma", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.sampler.adafl_alpha) {
            return err("sampler.adafl_alpha", "must be in [0, 1)");
        }
        schedule_keys(&self.sampler.schedule)?;
        Ok(())
    }
}

/// Sets a dotted key (e.g. `fedglad.gamma`) in a TOML document. The string
/// value is read as an integer, float, boolean or, failing those, a string.
pub fn set_dotted(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let value = if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cur = doc;
    for p in parts {
        cur = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(key, "not a table"))?
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| Error::config(key, "not a table"))?;
    // floats written as integers, e.g. `lr=1`
    let value = match (table.get(last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert(last.to_string(), value);
    Ok(())
}
