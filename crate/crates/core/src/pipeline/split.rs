use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::series::VitalsWindow;
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Split> {
        Split::ALL.get(c as usize).copied()
    }
}

/// Window lists of a patient-disjoint split, each in canonical
/// (patient_id, vital, anchor) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partition {
    pub train: Vec<VitalsWindow>,
    pub val: Vec<VitalsWindow>,
    pub test: Vec<VitalsWindow>,
}

impl Partition {
    pub fn get(&self, s: Split) -> &[VitalsWindow] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn canonical_sort(ws: &mut [VitalsWindow]) {
    ws.sort_by(|a, b| (&a.patient_id, a.vital, a.anchor).cmp(&(&b.patient_id, b.vital, b.anchor)));
}

/// Assigns whole patients to splits. Patients are shuffled, then the
/// validation split is filled until it holds `ratio[1]/Σratio` of the
/// windows, then the test split likewise, and the rest go to training.
pub fn split_by_patient(windows: Vec<VitalsWindow>, ratio: [u32; 3], rng: &mut Rng) -> Result<Partition> {
    let sum: u32 = ratio.iter().sum();
    if sum == 0 || ratio[0] == 0 {
        return Err(Error::Config(format!("invalid split ratio {ratio:?}")));
    }
    let mut by_patient: BTreeMap<String, Vec<VitalsWindow>> = BTreeMap::new();
    for w in windows {
        by_patient.entry(w.patient_id.clone()).or_default().push(w);
    }
    if by_patient.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 patients to split, found {}",
            by_patient.len()
        )));
    }
    let total: usize = by_patient.values().map(Vec::len).sum();
    let target = |r: u32| {
        let t = (total as f64 * r as f64 / sum as f64).round() as usize;
        if r > 0 { t.max(1) } else { 0 }
    };
    let (val_target, test_target) = (target(ratio[1]), target(ratio[2]));

    let mut patients: Vec<Vec<VitalsWindow>> = by_patient.into_values().collect();
    rng.shuffle(&mut patients);
    let mut out = Partition::default();
    for ws in patients {
        let dest = if out.val.len() < val_target {
            &mut out.val
        } else if out.test.len() < test_target {
            &mut out.test
        } else {
            &mut out.train
        };
        dest.extend(ws);
    }
    for part in [&mut out.train, &mut out.val, &mut out.test] {
        canonical_sort(part);
    }
    Ok(out)
}
