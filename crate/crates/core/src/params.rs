//! Named parameter storage, initialization, SGD and checkpoints.
//!
//! A checkpoint is a file of back-to-back TNSR records plus a sidecar
//! `<file>.index.json` mapping each tensor name to its byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
}

/// Trainable parameters and non-trainable buffers (e.g. running batchnorm
/// statistics), keyed by name in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_trainable(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), Entry { tensor, trainable: true });
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), Entry { tensor, trainable: false });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Scalar count of trainable entries whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.trainable()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f32]) -> Result<()> {
        self.get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?
            .accumulate_grad(grad)
    }

    pub fn accumulate_grad_owned(&mut self, name: &str, grad: Vec<f32>) -> Result<()> {
        self.get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?
            .accumulate_grad_owned(grad)
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(|e| e.tensor.clear_grad());
    }

    /// `p ← p − lr·∇p` for every trainable entry, then clears gradients.
    pub fn sgd_step(&mut self, lr: f32) -> Result<()> {
        if let Some((name, _)) = self
            .entries
            .iter()
            .find(|(_, e)| e.trainable && e.tensor.grad().is_none())
        {
            return Err(Error::Usage(format!("parameter `{name}` has no gradient; run backward first")));
        }
        for e in self.entries.values_mut().filter(|e| e.trainable) {
            let grad = e.tensor.take_grad().expect("checked above");
            e.tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .for_each(|(p, g)| *p -= lr * g);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut index = BTreeMap::new();
        let mut offset = 0u64;
        for (name, e) in &self.entries {
            let bytes = e.tensor.to_tnsr_bytes();
            out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
            index.insert(name.clone(), offset);
            offset += bytes.len() as u64;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
        let index_path = index_path(path);
        let json = serde_json::to_string_pretty(&index).expect("string keys serialize");
        fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))
    }

    /// Overwrites every entry of `self` with the checkpointed tensor of the
    /// same name. Shapes must match; extra names in the checkpoint are an
    /// error, as are missing ones.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let index_path = index_path(path);
        let raw = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: BTreeMap<String, u64> =
            serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", index_path.display())))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if index.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors but the model expects {}",
                index.len(),
                self.entries.len()
            )));
        }
        for (name, offset) in index {
            let slot = self
                .get_mut(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint tensor `{name}` is not part of the model")))?;
            let start = usize::try_from(offset)
                .ok()
                .filter(|&o| o < bytes.len())
                .ok_or_else(|| Error::Format(format!("offset {offset} for `{name}` is out of range")))?;
            let t = Tensor::read_tnsr(&mut &bytes[start..])?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

pub fn index_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".index.json");
    PathBuf::from(name)
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-limit..=limit))
}
