use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::Vital;
use super::series::VitalsWindow;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

/// Global per-vital min-max scaling, fit on training windows only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub ranges: BTreeMap<Vital, Range>,
}

impl MinMaxScaler {
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a VitalsWindow>) -> Result<Self> {
        let mut ranges: BTreeMap<Vital, Range> = BTreeMap::new();
        for w in windows {
            let r = ranges.entry(w.vital).or_insert(Range {
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            });
            for v in w.values() {
                r.min = r.min.min(v);
                r.max = r.max.max(v);
            }
        }
        if ranges.is_empty() {
            return Err(Error::Data("cannot fit a scaler on zero training windows".into()));
        }
        Ok(MinMaxScaler { ranges })
    }

    fn range(&self, vital: Vital) -> Result<Range> {
        self.ranges
            .get(&vital)
            .copied()
            .ok_or_else(|| Error::Data(format!("scaler has no training data for {vital}")))
    }

    /// `(x − min)/(max − min)`, or 0.5 when the training range is a point.
    /// Values outside the training range are not clipped.
    pub fn apply(&self, vital: Vital, x: f64) -> Result<f64> {
        let r = self.range(vital)?;
        Ok(if r.max > r.min { (x - r.min) / (r.max - r.min) } else { 0.5 })
    }

    pub fn inverse(&self, vital: Vital, y: f64) -> Result<f64> {
        let r = self.range(vital)?;
        Ok(if r.max > r.min { y * (r.max - r.min) + r.min } else { r.min })
    }

    pub fn apply_window(&self, w: &VitalsWindow) -> Result<VitalsWindow> {
        let map = |xs: &[f64]| xs.iter().map(|&x| self.apply(w.vital, x)).collect::<Result<Vec<_>>>();
        Ok(VitalsWindow {
            context: map(&w.context)?,
            horizon: map(&w.horizon)?,
            ..w.clone()
        })
    }
}
