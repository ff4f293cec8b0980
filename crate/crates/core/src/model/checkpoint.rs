//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "LNCK"
//! version   u32      CHECKPOINT_VERSION
//! dtype     u8       1 = f32, 2 = f64
//! meta_len  u32
//! meta      meta_len bytes of UTF-8 JSON (model config, epoch, RNG state, ...)
//! count     u32      number of tensors
//! count times:
//!   name_len u16, name (UTF-8), rank u8, rank x u32 dims, data (dtype, LE)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Rng, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    crate_version: String,
    config: ModelConfig,
    epoch: usize,
    rng: Option<Rng>,
    running_initialized: Vec<bool>,
}

/// A model plus the training position it was saved at.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub epoch: usize,
    pub rng: Option<Rng>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>, epoch: usize, rng: Option<Rng>) -> Self {
        Checkpoint { model, epoch, rng }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let meta = Meta {
            format_version: CHECKPOINT_VERSION,
            crate_version: crate::VERSION.to_string(),
            config: m.config().clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            running_initialized: m.running_stats().iter().map(|r| r.initialized).collect(),
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| Error::invalid(format!("checkpoint metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&u32::try_from(meta.len()).expect("metadata under 4 GiB").to_le_bytes());
        out.extend_from_slice(&meta);
        let mut tensors: Vec<(String, Tensor<T>)> =
            m.param_names().iter().cloned().zip(m.params().iter().cloned()).collect();
        for (i, r) in m.running_stats().iter().enumerate() {
            let c = r.channels();
            tensors.push((format!("norm{i}.running_mean"), Tensor::new(&[c], r.mean.clone())?));
            tensors.push((format!("norm{i}.running_var"), Tensor::new(&[c], r.var.clone())?));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                match T::DTYPE {
                    DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    /// Decodes a checkpoint; values stored in another dtype are converted.
    pub fn from_bytes(bytes: &[u8], source: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| r.fail("unknown dtype code"))?;
        let meta_len = r.u32()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.fail(&format!("metadata: {e}")))?;
        let mut model = Model::<T>::new(meta.config, &mut Rng::new(0)).map_err(|e| r.fail(&e.to_string()))?;
        let count = r.u32()? as usize;
        let mut params: Vec<Option<Tensor<T>>> = vec![None; model.params().len()];
        let mut running: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = vec![(None, None); model.running_stats().len()];
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.fail("tensor name is not UTF-8"))?.to_string();
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("tensor too large"))?;
            let raw = r.take(numel.checked_mul(dtype.size()).ok_or_else(|| r.fail("tensor too large"))?)?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
            };
            if let Some(i) = model.param_names().iter().position(|n| *n == name) {
                if model.params()[i].shape() != shape.as_slice() {
                    return Err(r.fail(&format!("{name}: shape {shape:?}, expected {:?}", model.params()[i].shape())));
                }
                params[i] = Some(Tensor::new(&shape, data)?);
            } else if let Some((layer, which)) = running_name(&name) {
                let slot = running.get_mut(layer).ok_or_else(|| r.fail(&format!("unexpected tensor {name}")))?;
                if data.len() != model.norm_channels()[layer] {
                    return Err(r.fail(&format!("{name}: {} values for {} channels", data.len(), model.norm_channels()[layer])));
                }
                if which == "mean" {
                    slot.0 = Some(data);
                } else {
                    slot.1 = Some(data);
                }
            } else {
                return Err(r.fail(&format!("unexpected tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        let params = params
            .into_iter()
            .zip(model.param_names())
            .map(|(p, n)| p.ok_or_else(|| r.fail(&format!("missing tensor {n}"))))
            .collect::<Result<Vec<_>>>()?;
        model.set_params(params)?;
        if meta.running_initialized.len() != running.len() {
            return Err(r.fail("running statistics flags do not match norm layers"));
        }
        for ((dst, (mean, var)), init) in model.running_stats_mut().iter_mut().zip(running).zip(meta.running_initialized) {
            dst.mean = mean.ok_or_else(|| r.fail("missing running mean"))?;
            dst.var = var.ok_or_else(|| r.fail("missing running variance"))?;
            dst.initialized = init;
        }
        Ok(Checkpoint { model, epoch: meta.epoch, rng: meta.rng })
    }
}

fn running_name(name: &str) -> Option<(usize, &'static str)> {
    let rest = name.strip_prefix("norm")?;
    let (idx, field) = rest.split_once('.')?;
    let which = match field {
        "running_mean" => "mean",
        "running_var" => "var",
        _ => return None,
    };
    Some((idx.parse().ok()?, which))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: &str) -> Error {
        Error::format(self.source, format!("{detail} (at byte {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.fail("truncated"))?;
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
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
