use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MSE is reported in units of 1e-4 and DTW in units of 1e-3.
pub const MSE_UNIT: f64 = 1e-4;
pub const DTW_UNIT: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mse: f64,
    pub dtw: f64,
    /// Percent.
    pub mape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse_raw: f64,
    pub mse_norm: f64,
    pub dtw_raw: f64,
    pub dtw_norm: f64,
    pub mape_percent: f64,
    pub n_windows: usize,
    pub n_runs: usize,
    pub runs: Vec<RunMetrics>,
}

impl MetricReport {
    pub fn from_runs(runs: Vec<RunMetrics>, n_windows: usize) -> Self {
        let k = runs.len() as f64;
        let mean = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).sum::<f64>() / k;
        let (mse, dtw, mape) = (mean(|r| r.mse), mean(|r| r.dtw), mean(|r| r.mape));
        MetricReport {
            mse_raw: mse,
            mse_norm: mse / MSE_UNIT,
            dtw_raw: dtw,
            dtw_norm: dtw / DTW_UNIT,
            mape_percent: mape,
            n_windows,
            n_runs: runs.len(),
            runs,
        }
    }

    /// One row per run plus a `mean` row, in the normalized units.
    pub fn table(&self) -> Table {
        let mut t = Table::new(["run", "mse_x1e-4", "dtw_x1e-3", "mape_pct"]);
        for (i, r) in self.runs.iter().enumerate() {
            t.push([
                i.to_string(),
                (r.mse / MSE_UNIT).to_string(),
                (r.dtw / DTW_UNIT).to_string(),
                r.mape.to_string(),
            ]);
        }
        t.push([
            "mean".to_string(),
            self.mse_norm.to_string(),
            self.dtw_norm.to_string(),
            self.mape_percent.to_string(),
        ]);
        t
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "windows: {}  runs: {}", self.n_windows, self.n_runs)?;
        writeln!(f, "{:>6} {:>12} {:>12} {:>10}", "run", "MSE x1e-4", "DTW x1e-3", "MAPE %")?;
        for (i, r) in self.runs.iter().enumerate() {
            writeln!(
                f,
                "{i:>6} {:>12.4} {:>12.4} {:>10.3}",
                r.mse / MSE_UNIT,
                r.dtw / DTW_UNIT,
                r.mape
            )?;
        }
        write!(
            f,
            "{:>6} {:>12.4} {:>12.4} {:>10.3}",
            "mean", self.mse_norm, self.dtw_norm, self.mape_percent
        )
    }
}

/// A header plus string rows, written as CSV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}
