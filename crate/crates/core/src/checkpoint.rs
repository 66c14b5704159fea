//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GF3D" | u32 version | u64 header length | header JSON
//! u64 tensor count | per tensor: u32 name length, name, u32 rank, u64 dims.., f64 data..
//! u8 has_optimizer | [u64 step | per tensor: f64 m.., f64 v..]
//! ```
//!
//! The header holds the run config and training progress. Optimizer moments
//! follow the parameter order and shapes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kernels::{ParamStore, Tensor};
use crate::model::Detector;
use crate::optim::AdamW;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"GF3D";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    state: TrainState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamW>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_detector(det: &Detector, state: TrainState, optimizer: Option<&AdamW>) -> Self {
        Self::from_store(&det.config, &det.store, state, optimizer)
    }

    pub fn from_store(config: &RunConfig, store: &ParamStore, state: TrainState, optimizer: Option<&AdamW>) -> Self {
        Self {
            config: config.clone(),
            state,
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            state: self.state.clone(),
        })
        .expect("header serialises");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    put_f64s(&mut out, m.data());
                    put_f64s(&mut out, v.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(corrupt("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = r.len()?;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| corrupt(format!("bad header: {e}")))?;
        header.config.validate()?;
        let count = r.len()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("tensor `{name}` is too large")))?;
            let data = r.f64s(numel)?;
            params.push((name, Tensor::from_parts(shape, data)));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for (_, t) in &params {
                    m.push(Tensor::from_parts(t.shape().to_vec(), r.f64s(t.numel())?));
                    v.push(Tensor::from_parts(t.shape().to_vec(), r.f64s(t.numel())?));
                }
                Some(AdamW {
                    weight_decay: header.config.weight_decay,
                    step,
                    m,
                    v,
                })
            }
            f => return Err(corrupt(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config: header.config,
            state: header.state,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Copies the stored tensors into `store`; names and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(corrupt(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| corrupt(format!("unexpected tensor `{name}`")))?;
            if store.value(id).shape() != t.shape() {
                return Err(corrupt(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    /// Rebuilds a detector from the stored config and parameters.
    pub fn to_detector(&self) -> Result<Detector> {
        let mut det = Detector::new(self.config.clone())?;
        self.restore_into(&mut det.store)?;
        Ok(det)
    }
}
