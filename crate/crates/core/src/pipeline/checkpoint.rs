//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SDCP"  u32 version
//! u32 len, config text
//! u32 count, then per parameter:
//!     u32 len, name  u32 rank  u32 extents[rank]  f32 values[product]
//! u8 has_optimizer; if 1:
//!     u64 step  f64 beta1  f64 beta2  f64 eps
//!     per parameter: f32 m[len]  f32 v[len]
//! ```

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::model::SeedFormer;
use super::optim::Adam;
use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDCP";
pub const VERSION: u32 = 1;

/// One saved tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerRecord {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Decoded contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn to_f32<T: Scalar>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

impl Checkpoint {
    pub fn capture<T: Scalar>(model: &SeedFormer<T>, optimizer: Option<&Adam<T>>) -> Self {
        Checkpoint {
            config_text: model.config.to_text(),
            params: model
                .store
                .iter()
                .map(|(_, p)| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: to_f32(&p.value),
                })
                .collect(),
            optimizer: optimizer.map(|o| OptimizerRecord {
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                m: o.m.iter().map(to_f32).collect(),
                v: o.v.iter().map(to_f32).collect(),
            }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.config_text.as_bytes());
        put_u32(&mut out, self.params.len());
        for p in &self.params {
            put_bytes(&mut out, p.name.as_bytes());
            put_u32(&mut out, p.shape.len());
            for &e in &p.shape {
                put_u32(&mut out, e);
            }
            put_f32s(&mut out, &p.values);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for x in [o.beta1, o.beta2, o.eps] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err("bad magic, not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let config_text = r.string()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| format_err(format!("parameter {name} has an overflowing shape")))?;
            let values = r.f32s(len)?;
            params.push(ParamRecord { name, shape, values });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for p in &params {
                    m.push(r.f32s(p.values.len())?);
                    v.push(r.f32s(p.values.len())?);
                }
                Some(OptimizerRecord {
                    step,
                    beta1,
                    beta2,
                    eps,
                    m,
                    v,
                })
            }
            f => return Err(format_err(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_text,
            params,
            optimizer,
        })
    }

    pub fn config(&self) -> Result<ModelConfig> {
        ModelConfig::from_text(&self.config_text)
            .map_err(|e| format_err(format!("checkpoint config is invalid: {e}")))
    }

    /// Copies parameter values into `store`, which must hold the same names
    /// and shapes in the same order.
    pub fn restore_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<(&str, &[usize])> = store.iter().map(|(_, p)| (p.name.as_str(), p.value.shape())).collect();
        for i in 0..names.len().max(self.params.len()) {
            let ok = match (names.get(i), self.params.get(i)) {
                (Some(&(name, shape)), Some(rec)) => rec.name == name && rec.shape == shape,
                _ => false,
            };
            if !ok {
                let (want, got) = (names.get(i), self.params.get(i));
                let name = want.map(|w| w.0).or(got.map(|r| r.name.as_str())).unwrap_or_default();
                return Err(format_err(format!(
                    "parameter mismatch at {name}: model expects {:?}, checkpoint has {:?}",
                    want,
                    got.map(|r| (&r.name, &r.shape))
                )));
            }
        }
        for (rec, p) in self.params.iter().zip(store.iter_mut()) {
            for (d, &s) in p.value.data_mut().iter_mut().zip(&rec.values) {
                *d = T::from_f64(s as f64);
            }
        }
        Ok(())
    }

    pub fn restore_optimizer<T: Scalar>(&self, store: &ParamStore<T>) -> Option<Adam<T>> {
        self.optimizer.as_ref().map(|o| {
            let mut adam = Adam::new(store, o.beta1, o.beta2, o.eps);
            adam.step = o.step;
            for (dst, src) in adam.m.iter_mut().zip(&o.m).chain(adam.v.iter_mut().zip(&o.v)) {
                for (d, &s) in dst.data_mut().iter_mut().zip(src) {
                    *d = T::from_f64(s as f64);
                }
            }
            adam
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(format!("truncated checkpoint: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err("string is not utf-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &SeedFormer<T>,
    optimizer: Option<&Adam<T>>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, Checkpoint::capture(model, optimizer).encode()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Rebuilds the model described by the checkpoint and loads its weights.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(SeedFormer<T>, Option<Adam<T>>)> {
    let ckpt = read_checkpoint(path)?;
    let mut model = SeedFormer::new(ckpt.config()?)?;
    ckpt.restore_params(&mut model.store)?;
    let adam = ckpt.restore_optimizer(&model.store);
    Ok((model, adam))
}

/// Loads weights into an existing model, failing on the first parameter
/// whose name or shape differs.
pub fn load_into<T: Scalar>(path: impl AsRef<Path>, model: &mut SeedFormer<T>) -> Result<Option<Adam<T>>> {
    let ckpt = read_checkpoint(path)?;
    ckpt.restore_params(&mut model.store)?;
    Ok(ckpt.restore_optimizer(&model.store))
}
