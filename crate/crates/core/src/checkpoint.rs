//! Versioned binary checkpoints.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "SPIKEVAEC" | u32 version | u64 epoch | u64 root seed | u64 optimizer step
//! | u32 len, config text | u32 tensor count
//! | per tensor: u32 len, name | u32 rank | u32 dims… | f32 payload
//! ```
//!
//! Tensors hold the parameters, tdBN running statistics and AdamW moments.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const MAGIC: &[u8; 9] = b"SPIKEVAEC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub epoch: u64,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ckpt_err(self.path, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let path = self.path;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ckpt_err(path, "invalid UTF-8 in text field"))
    }
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        let model = &trainer.model;
        let mut tensors = Vec::new();
        for p in model.params() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for (name, s) in model.stats() {
            let c = s.channels();
            tensors.push((format!("{name}.running_mean"), Tensor::new([c], s.mean.clone()).unwrap()));
            tensors.push((format!("{name}.running_var"), Tensor::new([c], s.var.clone()).unwrap()));
            tensors.push((format!("{name}.initialized"), Tensor::scalar(s.initialized as u8 as f32)));
        }
        for (i, p) in model.params().iter().enumerate() {
            let shape = p.value.shape().to_vec();
            tensors.push((format!("adam.m.{}", p.name), Tensor::new(shape.clone(), trainer.adam.m[i].clone()).unwrap()));
            tensors.push((format!("adam.v.{}", p.name), Tensor::new(shape, trainer.adam.v[i].clone()).unwrap()));
        }
        Checkpoint {
            version: VERSION,
            config: model.config().clone(),
            epoch: trainer.epoch,
            seed: model.config().seed,
            step: trainer.adam.step,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(ckpt_err(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ckpt_err(path, format!("unsupported format version {version}, this build reads {VERSION}")));
        }
        let (epoch, seed, step) = (r.u64()?, r.u64()?, r.u64()?);
        let config = ModelConfig::from_text(&r.string()?).map_err(|e| ckpt_err(path, e.to_string()))?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes_len = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| ckpt_err(path, format!("tensor {name} is too large")))?;
            let data = r.take(bytes_len)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data).unwrap()));
        }
        if r.pos != bytes.len() {
            return Err(ckpt_err(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            version,
            config,
            epoch,
            seed,
            step,
            tensors,
        })
    }

    /// Rebuilds the trainer; every expected tensor must be present with the
    /// shape the configuration implies.
    pub fn into_trainer(self, path: &Path) -> Result<Trainer> {
        let mut model = Model::new(&self.config).map_err(|e| ckpt_err(path, e.to_string()))?;
        let mut map: HashMap<String, Tensor> = self.tensors.into_iter().collect();
        let mut fetch = |name: String, shape: &[usize]| -> Result<Vec<f32>> {
            let t = map.remove(&name).ok_or_else(|| ckpt_err(path, format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(ckpt_err(path, format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t.into_data())
        };
        for p in model.params_mut() {
            let shape = p.value.shape().to_vec();
            let data = fetch(p.name.clone(), &shape)?;
            p.value.data_mut().copy_from_slice(&data);
        }
        for (name, s) in model.stats_mut() {
            let c = s.channels();
            s.mean = fetch(format!("{name}.running_mean"), &[c])?;
            s.var = fetch(format!("{name}.running_var"), &[c])?;
            s.initialized = fetch(format!("{name}.initialized"), &[1])?[0] != 0.0;
        }
        let mut adam = AdamState::new(model.params().iter().map(|p| p.value.numel()));
        adam.step = self.step;
        for (i, p) in model.params().iter().enumerate() {
            adam.m[i] = fetch(format!("adam.m.{}", p.name), p.value.shape())?;
            adam.v[i] = fetch(format!("adam.v.{}", p.name), p.value.shape())?;
        }
        if let Some(extra) = map.keys().next() {
            return Err(ckpt_err(path, format!("unexpected tensor {extra}")));
        }
        Ok(Trainer {
            model,
            adam,
            epoch: self.epoch,
        })
    }
}

/// Writes atomically: a sibling temporary file renamed over `path`.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_trainer(trainer).to_bytes();
    let mut tmp = PathBuf::from(path);
    tmp.set_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Loads a checkpoint file straight into a trainer.
pub fn load_trainer(path: &Path) -> Result<Trainer> {
    load_checkpoint(path)?.into_trainer(path)
}
