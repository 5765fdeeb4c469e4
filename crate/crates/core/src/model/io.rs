//! Binary weight files.
//!
//! Layout (little-endian): magic `TSFW`, `u32` version, `u32` length of the
//! TOML-encoded [`ModelConfig`], the config text, `u32` tensor count, then
//! per tensor: `u32` name length, name bytes, `u32` rank, `u64` dims, `f64` data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::network::ForecastModel;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TSFW";
const VERSION: u32 = 1;

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Writes a named tensor block.
pub(crate) fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_str(out, name);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte buffer that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }

    pub fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.filter(|&l| l <= self.remaining() / 8).ok_or_else(|| {
            Error::Format(format!("tensor {name:?} with shape {shape:?} exceeds the file"))
        })?;
        let data = self
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.remaining())))
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

impl ForecastModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = toml::to_string(self.config()).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &cfg);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t.shape(), t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model weight file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let cfg: ModelConfig =
            toml::from_str(&r.string()?).map_err(|e| Error::Format(format!("model config: {e}")))?;
        let mut model = ForecastModel::zeroed(cfg)?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {count}",
                model.params.len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let (name, shape, data) = r.tensor()?;
            let idx = model
                .params
                .index_of(&name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {name:?}")))?;
            let t = model.params.get_mut(idx);
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {shape:?}, expected {:?}",
                    t.shape()
                )));
            }
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::Format(format!("duplicate tensor {name:?}")));
            }
            t.data_mut().copy_from_slice(&data);
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
