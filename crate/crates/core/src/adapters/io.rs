//! Adapter checkpoints, stored apart from base weights.
//!
//! Layout (little-endian): magic `TSFA`, `u32` version, TOML text of the
//! adapter config (which carries `shared_seed`), TOML text of the model
//! config it was trained against, `u32` tensor count, then named tensor
//! blocks as in weight files. Tensor names are registry names: selected base
//! parameters for selective methods and full fine-tuning, adapter-owned
//! learnables otherwise. Frozen shared state is rebuilt from the seed.

use std::path::Path;

use super::config::AdapterConfig;
use super::state::Adapter;
use crate::error::{Error, Result};
use crate::model::{put_str, put_tensor, put_u32, read_file, write_file, ForecastModel, ModelConfig, Reader};
use crate::numerics::Rng;

const MAGIC: &[u8; 4] = b"TSFA";
const VERSION: u32 = 1;

fn toml_text<T: serde::Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

impl Adapter {
    pub fn to_bytes(&self, model: &ForecastModel) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &toml_text(self.config())?);
        put_str(&mut out, &toml_text(model.config())?);
        let base = self.selected_base_params();
        put_u32(&mut out, (base.len() + self.params().len()) as u32);
        for &i in base {
            let t = model.params().get(i);
            put_tensor(&mut out, model.params().name(i), t.shape(), t.data());
        }
        for (name, t) in self.params().iter() {
            put_tensor(&mut out, name, t.shape(), t.data());
        }
        Ok(out)
    }

    /// Attaches the checkpointed adapter to `model` and restores its tensors.
    pub fn from_bytes(bytes: &[u8], model: &mut ForecastModel) -> Result<Adapter> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an adapter checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported adapter checkpoint version {version}")));
        }
        let cfg: AdapterConfig =
            toml::from_str(&r.string()?).map_err(|e| Error::Format(format!("adapter config: {e}")))?;
        let mcfg: ModelConfig =
            toml::from_str(&r.string()?).map_err(|e| Error::Format(format!("model config: {e}")))?;
        if &mcfg != model.config() {
            return Err(Error::Config("adapter checkpoint was trained on a different model configuration".into()));
        }
        // per-site initial values are overwritten below
        let mut adapter = Adapter::attach(model, cfg, &mut Rng::new(0))?;
        let count = r.u32()? as usize;
        let expected = adapter.selected_base_params().len() + adapter.params().len();
        if count != expected {
            return Err(Error::Format(format!("expected {expected} tensors, found {count}")));
        }
        for _ in 0..count {
            let (name, shape, data) = r.tensor()?;
            let target = if let Some(i) = adapter.params().index_of(&name) {
                adapter.params_mut().get_mut(i)
            } else {
                match model.params().index_of(&name) {
                    Some(i) if adapter.selected_base_params().contains(&i) => model.params_mut().get_mut(i),
                    _ => return Err(Error::Format(format!("unexpected tensor {name:?}"))),
                }
            };
            if target.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {shape:?}, expected {:?}",
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(&data);
        }
        r.finish()?;
        Ok(adapter)
    }

    pub fn save(&self, model: &ForecastModel, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes(model)?)
    }

    pub fn load(path: &Path, model: &mut ForecastModel) -> Result<Adapter> {
        Self::from_bytes(&read_file(path)?, model)
    }
}
