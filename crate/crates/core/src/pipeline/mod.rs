//! Vitals ingestion, resampling, windowing, smoothing, scaling and
//! patient-disjoint splitting, plus a synthetic cohort generator.

mod dataset;
mod records;
mod scaler;
mod series;
mod split;
mod synthetic;

pub use dataset::{preprocess, PipelineConfig, SplitDataset, RECORD_BYTES};
pub use records::{
    ingest_anchors, ingest_anchors_reader, ingest_csv, ingest_reader, write_anchors_csv, write_records_csv, Ingested,
    Reject, Vital, VitalsRecord, ANCHOR_HEADER, CSV_HEADER,
};
pub use scaler::{MinMaxScaler, Range};
pub use series::{lowpass, make_windows, resample_and_impute, RegularSeries, VitalsWindow, Windowing, GRID_SECONDS};
pub use split::{split_by_patient, Partition, Split};
pub use synthetic::{
    default_episodes, generate_synthetic, generate_with_episodes, Domain, SyntheticData, BP_BASELINE_SHIFT,
    BP_BOUNDS, DEFAULT_EPISODES, DEFAULT_PATIENTS, HR_BASELINE_SHIFT, HR_BOUNDS,
};
