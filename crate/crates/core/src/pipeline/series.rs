//! Regular 5-minute series, windowing and smoothing.

use std::collections::BTreeMap;

use super::records::{Vital, VitalsRecord};
use crate::error::{Error, Result};
use crate::model::{CONTEXT_LEN, HORIZON_LEN};

/// Default grid spacing in seconds.
pub const GRID_SECONDS: i64 = 300;

/// One (patient, vital) series on an absolute grid of `step`-second ticks.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularSeries {
    pub patient_id: String,
    pub vital: Vital,
    /// Timestamp of `values[0]`; a multiple of `step`.
    pub start: i64,
    pub step: i64,
    pub values: Vec<f64>,
    /// False for ticks before the first observation.
    pub valid: Vec<bool>,
}

impl RegularSeries {
    pub fn tick_time(&self, i: usize) -> i64 {
        self.start + i as i64 * self.step
    }

    /// Index of the tick at time `t`, if `t` is on the grid and in range.
    pub fn index_of(&self, t: i64) -> Option<usize> {
        if t < self.start || (t - self.start) % self.step != 0 {
            return None;
        }
        let i = ((t - self.start) / self.step) as usize;
        (i < self.values.len()).then_some(i)
    }

    /// Forward-fills the series up to and including tick time `t`.
    pub fn extend_to(&mut self, t: i64) {
        let Some(&last) = self.values.last() else { return };
        let last_valid = *self.valid.last().unwrap();
        while self.tick_time(self.values.len() - 1) < t {
            self.values.push(last);
            self.valid.push(last_valid);
        }
    }
}

/// Aligns observations to the grid: each tick takes the latest observation
/// at or before it; ticks before the first observation are invalid. Output
/// is sorted by (patient_id, vital).
pub fn resample_and_impute(records: &[VitalsRecord], grid_seconds: i64) -> Result<Vec<RegularSeries>> {
    if grid_seconds <= 0 {
        return Err(Error::Config(format!("grid must be positive, got {grid_seconds}")));
    }
    let mut groups: BTreeMap<(&str, Vital), Vec<(i64, f64)>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.patient_id.as_str(), r.vital))
            .or_default()
            .push((r.timestamp, r.value));
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((pid, vital), mut obs) in groups {
        // stable: duplicate timestamps keep the last row in input order
        obs.sort_by_key(|o| o.0);
        let first = obs[0].0.div_euclid(grid_seconds) * grid_seconds;
        let last = obs[obs.len() - 1].0.div_euclid(grid_seconds) * grid_seconds;
        let n = ((last - first) / grid_seconds) as usize + 1;
        let mut values = vec![f64::NAN; n];
        let mut valid = vec![false; n];
        let mut j = 0;
        let mut current: Option<f64> = None;
        for i in 0..n {
            let t = first + i as i64 * grid_seconds;
            while j < obs.len() && obs[j].0 <= t {
                current = Some(obs[j].1);
                j += 1;
            }
            if let Some(v) = current {
                values[i] = v;
                valid[i] = true;
            }
        }
        out.push(RegularSeries {
            patient_id: pid.to_string(),
            vital,
            start: first,
            step: grid_seconds,
            values,
            valid,
        });
    }
    Ok(out)
}

/// A 72-step context and the 36 steps that follow it, ending at `anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct VitalsWindow {
    pub patient_id: String,
    pub vital: Vital,
    pub anchor: i64,
    pub context: Vec<f64>,
    pub horizon: Vec<f64>,
}

impl VitalsWindow {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.context.iter().chain(&self.horizon).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Windowing {
    pub windows: Vec<VitalsWindow>,
    /// Anchors that produced no window, with the reason.
    pub dropped: Vec<(i64, String)>,
}

/// Cuts one window per anchor from the grid ticks in `[anchor − 9h, anchor)`.
pub fn make_windows(series: &RegularSeries, anchors: &[i64]) -> Windowing {
    let total = CONTEXT_LEN + HORIZON_LEN;
    let span = total as i64 * series.step;
    let mut out = Windowing::default();
    for &anchor in anchors {
        let first_tick = (anchor - span + series.step - 1).div_euclid(series.step) * series.step;
        let range = series
            .index_of(first_tick)
            .filter(|&i| i + total <= series.values.len());
        let Some(i0) = range else {
            out.dropped.push((anchor, format!("fewer than {total} ticks before anchor")));
            continue;
        };
        if series.valid[i0..i0 + total].iter().any(|v| !v) {
            out.dropped.push((anchor, "window contains ticks before the first observation".into()));
            continue;
        }
        let ticks = &series.values[i0..i0 + total];
        out.windows.push(VitalsWindow {
            patient_id: series.patient_id.clone(),
            vital: series.vital,
            anchor,
            context: ticks[..CONTEXT_LEN].to_vec(),
            horizon: ticks[CONTEXT_LEN..].to_vec(),
        });
    }
    out
}

/// Centered moving average of odd `width`; near the edges the window
/// shrinks symmetrically so the filter stays zero-phase.
pub fn lowpass(series: &[f64], width: usize) -> Result<Vec<f64>> {
    if width < 1 || width.is_multiple_of(2) {
        return Err(Error::Config(format!("lowpass width must be odd and >= 1, got {width}")));
    }
    let half = width / 2;
    let n = series.len();
    Ok((0..n)
        .map(|i| {
            let k = half.min(i).min(n - 1 - i);
            let s = &series[i - k..=i + k];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect())
}
