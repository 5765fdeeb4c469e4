//! End-to-end preprocessing and the processed-dataset file.
//!
//! File layout (little-endian): magic `TSFD`, `u32` version, `u32`-prefixed
//! TOML [`Manifest`], `u32` patient count and `u32`-prefixed patient ids,
//! `u64` record count, then fixed-width 880-byte records:
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 1    | split code (0 train, 1 val, 2 test) |
//! | 1      | 1    | vital code (0 MeanBP, 1 HR)         |
//! | 2      | 2    | zero padding                        |
//! | 4      | 4    | patient index into the id table     |
//! | 8      | 8    | anchor, `i64` epoch seconds         |
//! | 16     | 576  | context, 72 × `f64`                 |
//! | 592    | 288  | horizon, 36 × `f64`                 |

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::{Vital, VitalsRecord};
use super::scaler::{MinMaxScaler, Range};
use super::series::{lowpass, make_windows, resample_and_impute, VitalsWindow, GRID_SECONDS};
use super::split::{split_by_patient, Partition, Split};
use crate::error::{Error, Result};
use crate::model::{put_str, put_u32, read_file, write_file, Reader, CONTEXT_LEN, HORIZON_LEN};
use crate::numerics::Rng;

const MAGIC: &[u8; 4] = b"TSFD";
const VERSION: u32 = 1;
pub const RECORD_BYTES: usize = 16 + 8 * (CONTEXT_LEN + HORIZON_LEN);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid_seconds: i64,
    /// Odd moving-average width; 1 disables smoothing.
    pub lowpass_width: usize,
    /// train:val:test by window count.
    pub split_ratio: [u32; 3],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid_seconds: GRID_SECONDS,
            lowpass_width: 5,
            split_ratio: [8, 1, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    /// Scaled windows.
    pub splits: Partition,
    pub scaler: MinMaxScaler,
    pub config: PipelineConfig,
    /// Anchors that produced no window.
    pub dropped: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: PipelineConfig,
    dropped: u64,
    counts: BTreeMap<String, u64>,
    scaler: BTreeMap<String, Range>,
}

/// Resample, window, smooth, split by patient, then scale with a scaler fit
/// on the training split. Series are forward-filled up to their last anchor. Context and horizon are smoothed separately so no
/// horizon value leaks into the last context ticks.
pub fn preprocess(
    records: &[VitalsRecord],
    anchors: &[(String, i64)],
    config: &PipelineConfig,
    rng: &mut Rng,
) -> Result<SplitDataset> {
    let mut by_patient: HashMap<&str, Vec<i64>> = HashMap::new();
    for (p, a) in anchors {
        by_patient.entry(p.as_str()).or_default().push(*a);
    }
    let mut windows = Vec::new();
    let mut dropped = 0;
    for mut series in resample_and_impute(records, config.grid_seconds)? {
        let Some(a) = by_patient.get(series.patient_id.as_str()) else {
            continue;
        };
        // a missing final observation is carried forward up to the anchor
        if let Some(&last) = a.iter().max() {
            series.extend_to(last - config.grid_seconds);
        }
        let w = make_windows(&series, a);
        dropped += w.dropped.len();
        windows.extend(w.windows);
    }
    for w in &mut windows {
        w.context = lowpass(&w.context, config.lowpass_width)?;
        w.horizon = lowpass(&w.horizon, config.lowpass_width)?;
    }
    let raw = split_by_patient(windows, config.split_ratio, rng)?;
    let scaler = MinMaxScaler::fit(&raw.train)?;
    let scale = |ws: &[VitalsWindow]| ws.iter().map(|w| scaler.apply_window(w)).collect::<Result<Vec<_>>>();
    let splits = Partition {
        train: scale(&raw.train)?,
        val: scale(&raw.val)?,
        test: scale(&raw.test)?,
    };
    Ok(SplitDataset {
        splits,
        scaler,
        config: config.clone(),
        dropped,
    })
}

fn fmt_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("dataset manifest: {e}"))
}

impl SplitDataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            config: self.config.clone(),
            dropped: self.dropped as u64,
            counts: Split::ALL
                .iter()
                .map(|&s| (format!("{s:?}").to_lowercase(), self.splits.get(s).len() as u64))
                .collect(),
            scaler: self.scaler.ranges.iter().map(|(v, r)| (v.name().to_string(), *r)).collect(),
        };
        let text = toml::to_string(&manifest).map_err(fmt_err)?;

        let mut ids: Vec<&str> = Split::ALL
            .iter()
            .flat_map(|&s| self.splits.get(s).iter().map(|w| w.patient_id.as_str()))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let index: HashMap<&str, u32> = ids.iter().enumerate().map(|(i, &p)| (p, i as u32)).collect();

        let mut out = Vec::with_capacity(64 + text.len() + self.splits.len() * RECORD_BYTES);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &text);
        put_u32(&mut out, ids.len() as u32);
        for p in &ids {
            put_str(&mut out, p);
        }
        out.extend_from_slice(&(self.splits.len() as u64).to_le_bytes());
        for s in Split::ALL {
            for w in self.splits.get(s) {
                if w.context.len() != CONTEXT_LEN || w.horizon.len() != HORIZON_LEN {
                    return Err(Error::Contract(format!("window for {} is not 72/36", w.patient_id)));
                }
                out.push(s.code());
                out.push(w.vital.code());
                out.extend_from_slice(&[0, 0]);
                out.extend_from_slice(&index[w.patient_id.as_str()].to_le_bytes());
                out.extend_from_slice(&w.anchor.to_le_bytes());
                for v in w.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a processed dataset file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let manifest: Manifest = toml::from_str(&r.string()?).map_err(fmt_err)?;
        let n_ids = r.u32()? as usize;
        let ids = (0..n_ids).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let n = r.u64()? as usize;
        if r.remaining() != n.saturating_mul(RECORD_BYTES) {
            return Err(Error::Format(format!(
                "{n} records need {} bytes, found {}",
                n.saturating_mul(RECORD_BYTES),
                r.remaining()
            )));
        }
        let mut splits = Partition::default();
        for i in 0..n {
            let rec = r.take(RECORD_BYTES)?;
            let bad = |what: &str| Error::Format(format!("record {i}: {what}"));
            let split = Split::from_code(rec[0]).ok_or_else(|| bad("bad split code"))?;
            let vital = Vital::from_code(rec[1]).ok_or_else(|| bad("bad vital code"))?;
            let pid = u32::from_le_bytes(rec[4..8].try_into().unwrap()) as usize;
            let patient_id = ids.get(pid).ok_or_else(|| bad("patient index out of range"))?.clone();
            let anchor = i64::from_le_bytes(rec[8..16].try_into().unwrap());
            let vals: Vec<f64> = rec[16..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let w = VitalsWindow {
                patient_id,
                vital,
                anchor,
                context: vals[..CONTEXT_LEN].to_vec(),
                horizon: vals[CONTEXT_LEN..].to_vec(),
            };
            match split {
                Split::Train => splits.train.push(w),
                Split::Val => splits.val.push(w),
                Split::Test => splits.test.push(w),
            }
        }
        r.finish()?;
        for s in Split::ALL {
            let key = format!("{s:?}").to_lowercase();
            if manifest.counts.get(&key).copied() != Some(splits.get(s).len() as u64) {
                return Err(Error::Format(format!("{key} record count disagrees with the manifest")));
            }
        }
        let ranges = manifest
            .scaler
            .into_iter()
            .map(|(k, r)| Ok((k.parse::<Vital>().map_err(fmt_err)?, r)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(SplitDataset {
            splits,
            scaler: MinMaxScaler { ranges },
            config: manifest.config,
            dropped: manifest.dropped as usize,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
