use serde::{Deserialize, Serialize};

use super::log::ExperimentLog;
use super::train::{finetune, TrainConfig};
use crate::adapters::{count_trainable_params, AdapterConfig, Method};
use crate::error::{Error, Result};
use crate::metrics::{EvalConfig, Table};
use crate::model::{ForecastModel, ModelConfig, Preset};
use crate::pipeline::SplitDataset;

pub const VERA_RANKS: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const FOURIER_COEFFICIENTS: [usize; 4] = [25, 50, 100, 200];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[default]
    None,
    VeraRank,
    FourierN,
}

impl SweepAxis {
    pub fn admissible(self) -> &'static [usize] {
        match self {
            SweepAxis::None => &[],
            SweepAxis::VeraRank => &VERA_RANKS,
            SweepAxis::FourierN => &FOURIER_COEFFICIENTS,
        }
    }

    fn label(self) -> &'static str {
        match self {
            SweepAxis::None => "point",
            SweepAxis::VeraRank => "rank",
            SweepAxis::FourierN => "n",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(SweepAxis::None),
            "vera_rank" => Ok(SweepAxis::VeraRank),
            "fourier_n" => Ok(SweepAxis::FourierN),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub preset: Preset,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub axis: SweepAxis,
    /// Axis values; empty means the whole admissible set.
    pub values: Vec<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            preset: Preset::Desk,
            adapter: AdapterConfig::new(Method::LoRA),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            axis: SweepAxis::None,
            values: Vec::new(),
        }
    }
}

impl ExperimentSpec {
    /// The adapter configuration of every sweep point, in axis order.
    pub fn points(&self) -> Result<Vec<(Option<usize>, AdapterConfig)>> {
        let need = match self.axis {
            SweepAxis::None => {
                if !self.values.is_empty() {
                    return Err(Error::Config("a sweep without an axis takes no values".into()));
                }
                return Ok(vec![(None, self.adapter.clone())]);
            }
            SweepAxis::VeraRank => Method::VeRA,
            SweepAxis::FourierN => Method::FourierFT,
        };
        if self.adapter.method != need {
            return Err(Error::Config(format!(
                "axis {:?} sweeps {need}, but the adapter method is {}",
                self.axis, self.adapter.method
            )));
        }
        let mut values = if self.values.is_empty() {
            self.axis.admissible().to_vec()
        } else {
            self.values.clone()
        };
        if let Some(v) = values.iter().find(|v| !self.axis.admissible().contains(v)) {
            return Err(Error::Config(format!(
                "{v} is not an admissible {:?} value {:?}",
                self.axis,
                self.axis.admissible()
            )));
        }
        values.sort_unstable();
        values.dedup();
        Ok(values
            .into_iter()
            .map(|v| {
                let cfg = match self.axis {
                    SweepAxis::VeraRank => self.adapter.clone().with_rank(v),
                    _ => self.adapter.clone().with_coefficients(v),
                };
                (Some(v), cfg)
            })
            .collect())
    }

    fn value_cell(&self, v: Option<usize>) -> String {
        v.map_or_else(|| self.adapter.method.name().to_string(), |v| v.to_string())
    }
}

/// Trainable parameters in millions, to the four decimals of a sweep table.
pub fn params_millions(count: usize) -> String {
    format!("{:.4}", count as f64 / 1e6)
}

/// The `#Params` column of the sweep alone, computed for the spec's preset
/// without training.
pub fn sweep_budget(spec: &ExperimentSpec) -> Result<Table> {
    let mcfg = ModelConfig::preset(spec.preset);
    let mut t = Table::new([spec.axis.label(), "params", "params_M"]);
    for (v, cfg) in spec.points()? {
        let n = count_trainable_params(&cfg, &mcfg).total;
        t.push([spec.value_cell(v), n.to_string(), params_millions(n)]);
    }
    Ok(t)
}

/// One fine-tuning run per axis value. Rows are in axis order with the
/// test metrics in report units and the trainable count in millions.
pub fn sweep(spec: &ExperimentSpec, base: &ForecastModel, data: &SplitDataset, log: &mut ExperimentLog) -> Result<Table> {
    if base.config() != &ModelConfig::preset(spec.preset) {
        return Err(Error::Config(format!("base checkpoint is not a {} model", spec.preset)));
    }
    let mut t = Table::new([spec.axis.label(), "mse_x1e-4", "dtw_x1e-3", "mape_pct", "params_M"]);
    for (v, cfg) in spec.points()? {
        log.event("sweep_point", &[("axis", spec.axis.label().into()), ("value", spec.value_cell(v))]);
        let out = finetune(base, &cfg, data, &spec.train, &spec.eval, log)?;
        t.push([
            spec.value_cell(v),
            out.report.mse_norm.to_string(),
            out.report.dtw_norm.to_string(),
            out.report.mape_percent.to_string(),
            params_millions(out.budget.total),
        ]);
    }
    Ok(t)
}
