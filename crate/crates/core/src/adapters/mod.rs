//! Parameter-efficient adaptation methods over a [`ForecastModel`](crate::model::ForecastModel).
//!
//! Selective methods (BitFit, LN tuning) unfreeze a subset of the base
//! registry. Additive methods (LoRA, VeRA, FourierFT) keep every base weight
//! frozen and add a learned update to the targeted attention projections.

mod config;
mod count;
mod io;
pub mod spectral;
mod state;

pub use config::{AdapterConfig, BitFitScope, LnScope, Method};
pub use count::{count_trainable_params, format_millions, ParameterBudgetReport};
pub use state::{Adapter, FrozenView, ADAPTER_GROUP};
