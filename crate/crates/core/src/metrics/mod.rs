//! Forecast accuracy: MSE, MAPE and DTW, median-of-K point forecasts and
//! multi-run aggregation over a window set.

mod report;

pub use report::{MetricReport, RunMetrics, Table};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_streams, ForecastModel, ForecastResult, InferenceEngine, WeightAdapter};
use crate::numerics::{fnv1a, Rng};
use crate::pipeline::VitalsWindow;

/// Default MAPE denominator guard.
pub const MAPE_EPS: f64 = 1e-8;

fn check_pair(op: &'static str, pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Dimension {
            op,
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("mse", pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// `100 · mean(|pred − truth| / max(|truth|, eps))`.
pub fn mape(pred: &[f64], truth: &[f64], eps: f64) -> Result<f64> {
    check_pair("mape", pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs() / t.abs().max(eps)).sum();
    Ok(100.0 * s / pred.len() as f64)
}

/// Unconstrained DTW with squared-difference local cost and no path
/// normalization.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("dtw of an empty series".into()));
    }
    let n = b.len();
    let mut prev = vec![f64::INFINITY; n + 1];
    let mut cur = vec![f64::INFINITY; n + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for j in 1..=n {
            let c = (x - b[j - 1]) * (x - b[j - 1]);
            cur[j] = c + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[n])
}

/// All three metrics for one point forecast.
pub fn window_metrics(pred: &[f64], truth: &[f64]) -> Result<RunMetrics> {
    Ok(RunMetrics {
        mse: mse(pred, truth)?,
        dtw: dtw(pred, truth)?,
        mape: mape(pred, truth, MAPE_EPS)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub n_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 20,
            n_runs: 10,
        }
    }
}

/// Identity hash of a window; names its sampling stream within a run.
pub fn window_key(w: &VitalsWindow) -> u64 {
    fnv1a(format!("{}\u{0}{}\u{0}{}", w.patient_id, w.vital, w.anchor).as_bytes())
}

/// Evaluates `windows` over `n_runs` seeded runs. Run `r` draws the samples
/// of a window from `master.child(r).child(key)`, where `key` hashes the
/// window's identity, and window means are summed in canonical order, so
/// the report does not depend on the order of `windows`.
pub fn evaluate(
    model: &ForecastModel,
    adapter: Option<&dyn WeightAdapter>,
    windows: &[VitalsWindow],
    cfg: &EvalConfig,
    rng: &mut Rng,
) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(Error::Data("evaluation needs at least one window".into()));
    }
    if cfg.n_samples == 0 || cfg.n_runs == 0 {
        return Err(Error::Config("n_samples and n_runs must be at least 1".into()));
    }
    let master = Rng::new(rng.next_u64());
    let runs: Vec<Rng> = (0..cfg.n_runs as u64).map(|r| master.child(r)).collect();
    let engine = InferenceEngine::new(model, adapter)?;
    let tok = &model.config().tokenizer;

    let mut order: Vec<&VitalsWindow> = windows.iter().collect();
    order.sort_by(|a, b| (&a.patient_id, a.vital, a.anchor).cmp(&(&b.patient_id, b.vital, b.anchor)));

    let mut per_run = vec![RunMetrics::default(); cfg.n_runs];
    for w in order {
        let enc = engine.encode(&w.context)?;
        let key = window_key(w);
        // every run's samples are decoded together in one batch
        let mut streams: Vec<Rng> = runs
            .iter()
            .flat_map(|r| sample_streams(&mut r.child(key), cfg.n_samples))
            .collect();
        let paths = engine.sample_with_streams(&enc, &mut streams)?;
        for (r, chunk) in paths.chunks(cfg.n_samples).enumerate() {
            let samples = chunk.iter().map(|ids| tok.detokenize(ids, enc.scale)).collect();
            let f = ForecastResult::from_samples(samples);
            let m = window_metrics(&f.point, &w.horizon)?;
            per_run[r].mse += m.mse;
            per_run[r].dtw += m.dtw;
            per_run[r].mape += m.mape;
        }
    }
    let n = windows.len() as f64;
    for r in &mut per_run {
        r.mse /= n;
        r.dtw /= n;
        r.mape /= n;
    }
    Ok(MetricReport::from_runs(per_run, windows.len()))
}
