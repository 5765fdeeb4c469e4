//! Adam, source-domain pretraining, fine-tuning with a learning-rate grid
//! and early stopping, and the rank / coefficient sweeps.

mod adam;
mod log;
mod sweep;
mod train;

pub use adam::{Adam, AdamConfig};
pub use log::ExperimentLog;
pub use sweep::{params_millions, sweep, sweep_budget, ExperimentSpec, SweepAxis, FOURIER_COEFFICIENTS, VERA_RANKS};
pub use train::{finetune, pretrain, token_loss, FinetuneOutcome, PretrainOutcome, TrainConfig};
