use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::tensor::{AdamW, OptimizerSnapshot, ParamStore, Precision, Scalar};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

const FIRST: &str = "optimizer.first.";
const SECOND: &str = "optimizer.second.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
    pub len: usize,
}

/// JSON half of a checkpoint. The blob next to it holds every tensor listed
/// here back to back as little-endian floats of `dtype`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub step: u64,
    pub optimizer_step: u64,
    pub dtype: Precision,
    pub blob: String,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

/// A checkpoint read from disk, values widened to `f64` (exact for both
/// stored precisions).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub values: Vec<Vec<f64>>,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path.with_file_name(blob)
}

fn encode(values: &[f64], dtype: Precision, out: &mut Vec<u8>) {
    match dtype {
        Precision::F32 => values.iter().for_each(|&v| out.extend((v as f32).to_le_bytes())),
        Precision::F64 => values.iter().for_each(|&v| out.extend(v.to_le_bytes())),
    }
}

impl Checkpoint {
    /// Captures parameters and optimizer state of a run at `step`.
    pub fn capture<T: Scalar>(cfg: &RunConfig, step: u64, store: &ParamStore<T>, optim: &AdamW<T>) -> Result<Self> {
        let snap = optim.snapshot();
        let mut tensors = Vec::new();
        let mut values = Vec::new();
        let mut offset = 0;
        let widen = |v: &[T]| v.iter().map(|&x| x.to_f64()).collect::<Vec<f64>>();
        let mut push = |name: String, shape: &[usize], data: Vec<f64>| {
            tensors.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                offset,
                len: data.len(),
            });
            offset += data.len();
            values.push(data);
        };
        for (_, name, t) in store.iter() {
            push(name.to_string(), t.shape(), widen(t.data()));
        }
        for (prefix, bufs) in [(FIRST, &snap.first), (SECOND, &snap.second)] {
            for ((_, name, t), buf) in store.iter().zip(bufs.iter()) {
                push(format!("{prefix}{name}"), t.shape(), widen(buf));
            }
        }
        Ok(Checkpoint {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_VERSION,
                config_hash: cfg.hash()?,
                step,
                optimizer_step: snap.step,
                dtype: T::PRECISION,
                blob: String::new(),
                config: cfg.clone(),
                tensors,
            },
            values,
        })
    }

    /// Writes `path` (manifest) and a sibling `.bin` blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?;
        let mut manifest = self.manifest.clone();
        manifest.blob = format!("{stem}.bin");
        let mut bytes = Vec::new();
        for v in &self.values {
            encode(v, manifest.dtype, &mut bytes);
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(blob_path(path, &manifest.blob), bytes)?;
        fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(path)?)?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (supported: {CHECKPOINT_VERSION})",
                manifest.format_version
            )));
        }
        let bytes = fs::read(blob_path(path, &manifest.blob))?;
        let width = match manifest.dtype {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
        if bytes.len() != total * width {
            return Err(Error::Checkpoint(format!(
                "blob holds {} bytes, manifest describes {}",
                bytes.len(),
                total * width
            )));
        }
        let mut values = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            if t.shape.iter().product::<usize>() != t.len {
                return Err(Error::Checkpoint(format!("tensor `{}` shape/length mismatch", t.name)));
            }
            let raw = &bytes[t.offset * width..(t.offset + t.len) * width];
            values.push(match manifest.dtype {
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
            });
        }
        Ok(Checkpoint { manifest, values })
    }

    /// Rejects a checkpoint written under a different numeric config unless
    /// `force` is set.
    pub fn check_config(&self, cfg: &RunConfig, force: bool) -> Result<()> {
        let hash = cfg.hash()?;
        if hash != self.manifest.config_hash && !force {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match checkpoint {} (pass --force to load anyway)",
                &hash[..12],
                &self.manifest.config_hash[..12.min(self.manifest.config_hash.len())]
            )));
        }
        Ok(())
    }

    fn find(&self, name: &str) -> Option<(&TensorEntry, &Vec<f64>)> {
        self.manifest
            .tensors
            .iter()
            .zip(&self.values)
            .find(|(t, _)| t.name == name)
    }

    /// Copies stored parameter values into `store`, matching by name.
    pub fn load_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let (entry, vals) = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor `{name}`")))?;
            if entry.shape != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    entry.shape,
                    store.get(id).shape()
                )));
            }
            store.set_data(id, vals.iter().map(|&v| T::from_f64(v)).collect())?;
        }
        Ok(())
    }

    /// Restores optimizer moments and step count for `store`'s layout.
    pub fn load_optimizer<T: Scalar>(&self, store: &ParamStore<T>, optim: &mut AdamW<T>) -> Result<()> {
        let mut first = Vec::with_capacity(store.len());
        let mut second = Vec::with_capacity(store.len());
        for (_, name, _) in store.iter() {
            for (prefix, out) in [(FIRST, &mut first), (SECOND, &mut second)] {
                let (_, vals) = self
                    .find(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks optimizer state for `{name}`")))?;
                out.push(vals.iter().map(|&v| T::from_f64(v)).collect());
            }
        }
        optim.restore(OptimizerSnapshot {
            step: self.manifest.optimizer_step,
            first,
            second,
        })?;
        Ok(())
    }
}
