//! Encoder-decoder forecaster over mean-scaled, binned tokens.

mod config;
mod gradcheck;
mod inference;
mod io;
mod network;
mod registry;
mod tokenizer;

pub use config::{ModelConfig, Preset, TokenizerConfig, CONTEXT_LEN, HORIZON_LEN};
pub use gradcheck::{check_model_gradients, GradCheckReport, FD_FLOOR, FD_STEP};
pub use inference::{lower_median, sample_forecast, sample_streams, EncodedContext, ForecastResult, InferenceEngine};
pub use network::{ForecastModel, SiteUpdate, SiteUpdates, TokenBatch, WeightAdapter, BASE_GROUP};
pub use registry::{AttentionBlock, NormSlot, ParamClass, ParamRole, Proj, ProjSite, Stack};
pub use tokenizer::{mean_scale, Tokenized};

pub(crate) use io::{put_str, put_tensor, put_u32, read_file, write_file, Reader};
