//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CMTNCKPT"
//! version  u8
//! header   u32 length + UTF-8 `key = value` text (model config, `meta.*` keys)
//! count    u32
//! record   u8 kind (0 = parameter, 1 = running statistic)
//!          u16 name length + UTF-8 name
//!          u8 rank, rank × u64 extents
//!          product(extents) × f64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::config::ModelConfig;
use super::params::{BnBuffers, ModelParams};
use crate::autodiff::BatchNormStats;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u8 = 1;
const MAGIC: &[u8; 8] = b"CMTNCKPT";
const KIND_PARAM: u8 = 0;
const KIND_STAT: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Free-form provenance such as the training seed.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut kv = KeyValues::new("checkpoint");
        self.params.config().to_kv(&mut kv);
        for (k, v) in &self.meta {
            kv.set(&format!("meta.{k}"), v);
        }
        let header = kv.render();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());

        let stats = self.params.buffers();
        let count = self.params.iter().count() + 2 * stats.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let mut record = |kind: u8, name: &str, shape: &[usize], values: &[f64]| {
            out.push(kind);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            record(KIND_PARAM, name, t.shape(), t.data());
        }
        for (name, s) in stats {
            record(KIND_STAT, &format!("{name}.running_mean"), &[s.mean.len()], &s.mean);
            record(KIND_STAT, &format!("{name}.running_var"), &[s.var.len()], &s.var);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::format(origin, "header is not UTF-8"))?;
        let mut kv = KeyValues::parse(header, origin.display().to_string())?;
        let meta_keys: Vec<String> = kv
            .keys()
            .filter(|k| k.starts_with("meta."))
            .map(str::to_string)
            .collect();
        let mut meta = BTreeMap::new();
        for k in meta_keys {
            let v = kv.remove(&k).unwrap_or_default();
            meta.insert(k["meta.".len()..].to_string(), v);
        }
        let config = ModelConfig::from_kv(&kv)?;

        let count = r.u32()? as usize;
        let mut params = BTreeMap::new();
        let mut means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut vars: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..count {
            let kind = r.u8()?;
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::format(origin, "record name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            match kind {
                KIND_PARAM => {
                    params.insert(name, Tensor::new(shape, values)?);
                }
                KIND_STAT => {
                    if let Some(layer) = name.strip_suffix(".running_mean") {
                        means.insert(layer.to_string(), values);
                    } else if let Some(layer) = name.strip_suffix(".running_var") {
                        vars.insert(layer.to_string(), values);
                    } else {
                        return Err(Error::format(origin, format!("unknown statistic `{name}`")));
                    }
                }
                other => return Err(Error::format(origin, format!("unknown record kind {other}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after last record"));
        }
        let mut buffers = BnBuffers::new();
        for (layer, mean) in means {
            let var = vars
                .remove(&layer)
                .ok_or_else(|| Error::format(origin, format!("`{layer}` has no running_var")))?;
            let mut s = BatchNormStats::new(mean.len());
            s.mean = mean;
            s.var = var;
            buffers.insert(layer, s);
        }
        if let Some(layer) = vars.keys().next() {
            return Err(Error::format(origin, format!("`{layer}` has no running_mean")));
        }
        Ok(Checkpoint {
            params: ModelParams::from_parts(config, params, buffers)?,
            meta,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
