//! Run configuration: defaults, then a TOML file, then command-line
//! overrides, validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use tsfm_peft::adapters::AdapterConfig;
use tsfm_peft::metrics::EvalConfig;
use tsfm_peft::model::{ModelConfig, Preset};
use tsfm_peft::pipeline::{Domain, PipelineConfig, Split, DEFAULT_PATIENTS};
use tsfm_peft::trainer::{SweepAxis, TrainConfig};
use tsfm_peft::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; also used as `train.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paths: Paths,
    pub generate: GenerateConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelSection,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            paths: Paths::default(),
            generate: GenerateConfig::default(),
            pipeline: PipelineConfig::default(),
            model: ModelSection::default(),
            adapter: AdapterConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub records: Option<PathBuf>,
    pub anchors: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Base model weights.
    pub base: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub domain: Domain,
    pub patients: usize,
    /// Total anchors; derived from the patient count when absent.
    pub episodes: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            domain: Domain::Source,
            patients: DEFAULT_PATIENTS,
            episodes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { preset: Preset::Desk }
    }
}

impl ModelSection {
    pub fn config(&self) -> ModelConfig {
        ModelConfig::preset(self.preset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_samples: usize,
    pub n_runs: usize,
    pub split: Split,
    /// Leading windows of the split to evaluate; 0 = all.
    pub max_windows: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            n_samples: e.n_samples,
            n_runs: e.n_runs,
            split: Split::Test,
            max_windows: 0,
        }
    }
}

impl EvalSection {
    pub fn config(&self) -> EvalConfig {
        EvalConfig {
            n_samples: self.n_samples,
            n_runs: self.n_runs,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    /// Emit the parameter-budget column only, without training.
    pub dry_run: bool,
}

/// A `dotted.key = value` override. The value is read as a TOML literal
/// and falls back to a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    let value = toml::from_str::<Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, overlaid by `file` (if any), overlaid by `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        let mut cfg: RunConfig =
            Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = self.model.config().d_model;
        self.adapter.validate(d, d)?;
        if self.eval.n_samples == 0 || self.eval.n_runs == 0 {
            return Err(Error::Config("eval.n_samples and eval.n_runs must be at least 1".into()));
        }
        if self.generate.patients == 0 {
            return Err(Error::Config("generate.patients must be at least 1".into()));
        }
        if let Some(e) = self.generate.episodes {
            if !(self.generate.patients..=2 * self.generate.patients).contains(&e) {
                return Err(Error::Config("generate.episodes must lie in patients..=2·patients".into()));
            }
        }
        let r = self.pipeline.split_ratio;
        if r[0] == 0 || r.iter().sum::<u32>() == 0 {
            return Err(Error::Config(format!("invalid split ratio {r:?}")));
        }
        if self.pipeline.lowpass_width.is_multiple_of(2) {
            return Err(Error::Config("pipeline.lowpass_width must be odd".into()));
        }
        if self.pipeline.grid_seconds <= 0 {
            return Err(Error::Config("pipeline.grid_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// A required path, or a config error naming the key.
    pub fn require<'a>(&self, p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("missing paths.{key} (set it in the config or pass --{key})")))
    }
}
