//! Synthetic ICU vitals with a controllable domain shift.
//!
//! Each patient follows `baseline + slow sinusoid + circadian term + AR(1)
//! noise` per vital, observed every 5 minutes with a few dropped samples.
//! The `Shifted` domain draws baselines from different ranges and adds a
//! deterioration drift (heart rate rising, blood pressure falling) that
//! starts a few hours before each anchor and continues up to it.

use serde::{Deserialize, Serialize};

use super::records::{Vital, VitalsRecord};
use super::series::GRID_SECONDS;
use crate::model::{CONTEXT_LEN, HORIZON_LEN};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Shifted,
}

impl std::str::FromStr for Domain {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "source" => Ok(Domain::Source),
            "shifted" | "target" => Ok(Domain::Shifted),
            _ => Err(crate::Error::Config(format!("unknown domain {s:?}"))),
        }
    }
}

/// Patients in the default cohort.
pub const DEFAULT_PATIENTS: usize = 1442;
/// Diagnosis anchors in the default cohort; each yields one window per vital.
pub const DEFAULT_EPISODES: usize = 2010;

/// Mean heart-rate offset of the shifted domain's baselines (beats/min).
pub const HR_BASELINE_SHIFT: f64 = 20.0;
/// Mean blood-pressure offset of the shifted domain's baselines (mmHg).
pub const BP_BASELINE_SHIFT: f64 = -13.0;

pub const HR_BOUNDS: (f64, f64) = (40.0, 180.0);
pub const BP_BOUNDS: (f64, f64) = (30.0, 160.0);

const EPOCH: i64 = 1_700_000_100;
const DAY: i64 = 86_400;
const HOUR: f64 = 3600.0;
const DROP_PROB: f64 = 0.02;
/// Observed ticks before the earliest window start.
const LEAD_TICKS: i64 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<VitalsRecord>,
    /// (patient_id, anchor) pairs.
    pub anchors: Vec<(String, i64)>,
}

/// Anchors for `n_patients`, scaled from the default cohort's ratio.
pub fn default_episodes(n_patients: usize) -> usize {
    ((n_patients * DEFAULT_EPISODES) as f64 / DEFAULT_PATIENTS as f64).round() as usize
}

struct VitalModel {
    baseline: f64,
    slow_amp: f64,
    slow_period: f64,
    slow_phase: f64,
    circ_amp: f64,
    noise_sd: f64,
    drift_per_hour: f64,
    bounds: (f64, f64),
}

impl VitalModel {
    fn draw(vital: Vital, domain: Domain, rng: &mut Rng) -> Self {
        let (base_mean, base_sd, noise_sd, bounds) = match vital {
            Vital::HR => (80.0, 8.0, 1.5, HR_BOUNDS),
            Vital::MeanBP => (85.0, 7.0, 1.2, BP_BOUNDS),
        };
        let (shift, drift) = match (domain, vital) {
            (Domain::Source, _) => (0.0, 0.0),
            (Domain::Shifted, Vital::HR) => (HR_BASELINE_SHIFT, rng.uniform_range(3.0, 6.0)),
            (Domain::Shifted, Vital::MeanBP) => (BP_BASELINE_SHIFT, -rng.uniform_range(2.0, 4.0)),
        };
        VitalModel {
            baseline: base_mean + shift + base_sd * rng.normal(),
            slow_amp: rng.uniform_range(2.0, 6.0),
            slow_period: rng.uniform_range(2.0, 6.0) * HOUR,
            slow_phase: rng.uniform_range(0.0, std::f64::consts::TAU),
            circ_amp: rng.uniform_range(1.0, 4.0),
            noise_sd,
            drift_per_hour: drift,
            bounds,
        }
    }
}

/// Generates `n_patients` patients with [`default_episodes`] anchors in total.
pub fn generate_synthetic(n_patients: usize, rng: &mut Rng, domain: Domain) -> SyntheticData {
    generate_with_episodes(n_patients, default_episodes(n_patients).max(n_patients), rng, domain)
}

/// Every patient gets one anchor; `episodes − n_patients` randomly chosen
/// patients get a second one at least 9 h after the first.
pub fn generate_with_episodes(n_patients: usize, episodes: usize, rng: &mut Rng, domain: Domain) -> SyntheticData {
    assert!(n_patients >= 1, "need at least one patient");
    assert!(
        (n_patients..=2 * n_patients).contains(&episodes),
        "episodes must lie in n_patients..=2·n_patients"
    );
    let prefix = match domain {
        Domain::Source => "S",
        Domain::Shifted => "T",
    };
    let mut twice = vec![false; n_patients];
    for i in rng.sample_indices(n_patients, episodes - n_patients) {
        twice[i] = true;
    }
    let window_ticks = (CONTEXT_LEN + HORIZON_LEN) as i64;
    let mut out = SyntheticData {
        records: Vec::new(),
        anchors: Vec::new(),
    };
    for (p, &two) in twice.iter().enumerate() {
        let mut prng = rng.child(p as u64);
        let pid = format!("{prefix}{p:05}");
        let first_anchor = EPOCH + p as i64 * DAY + prng.below(288) as i64 * GRID_SECONDS;
        let mut anchors = vec![first_anchor];
        if two {
            let gap = window_ticks + prng.below(72) as i64;
            anchors.push(first_anchor + gap * GRID_SECONDS);
        }
        let start = first_anchor - (window_ticks + LEAD_TICKS) * GRID_SECONDS;
        let end = *anchors.last().unwrap();
        for vital in Vital::ALL {
            let m = VitalModel::draw(vital, domain, &mut prng);
            // drift onset 4-7 h before each anchor
            let onsets: Vec<(f64, f64)> = anchors
                .iter()
                .map(|&a| ((a as f64) - prng.uniform_range(4.0, 7.0) * HOUR, a as f64))
                .collect();
            let mut ar = 0.0;
            let mut t = start;
            while t < end {
                ar = 0.9 * ar + m.noise_sd * prng.normal();
                let tf = t as f64;
                let slow = m.slow_amp * (std::f64::consts::TAU * tf / m.slow_period + m.slow_phase).sin();
                let circ = m.circ_amp * (std::f64::consts::TAU * (tf % DAY as f64) / DAY as f64).sin();
                let drift: f64 = onsets
                    .iter()
                    .filter(|(on, a)| tf >= *on && tf < *a)
                    .map(|(on, _)| m.drift_per_hour * (tf - on) / HOUR)
                    .sum();
                let value = (m.baseline + slow + circ + ar + drift).clamp(m.bounds.0, m.bounds.1);
                let dropped = t != start && prng.bernoulli(DROP_PROB);
                if !dropped {
                    out.records.push(VitalsRecord {
                        patient_id: pid.clone(),
                        vital,
                        timestamp: t,
                        value,
                    });
                }
                t += GRID_SECONDS;
            }
        }
        out.anchors.extend(anchors.into_iter().map(|a| (pid.clone(), a)));
    }
    out
}
