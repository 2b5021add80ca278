//! Checkpoint files: `"ADMC1"`, u64 header length, JSON header, then every
//! tensor's values, first and second moments as little-endian f64, then a
//! u64 FNV-1a checksum of all preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::{TrainConfig, Trainer};
use crate::autodiff::{Array, ParamStore};
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::model::{AdaMorph, ModelConfig};
use crate::rng::fnv1a;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ADMC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
    pub adam_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Next step to run.
    pub step: usize,
    pub seed: u64,
    pub stats: NormStats,
    pub dataset_fingerprint: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(trainer: &Trainer) -> Result<Vec<u8>> {
    let store = &trainer.model.params;
    let header = CheckpointHeader {
        format: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        model: trainer.model.config.clone(),
        train: trainer.config.clone(),
        step: trainer.step,
        seed: trainer.seed,
        stats: trainer.stats.clone(),
        dataset_fingerprint: format!("{:016x}", trainer.dataset_fingerprint),
        tensors: store
            .iter()
            .map(|(id, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                decay: p.decay,
                adam_steps: trainer.opt.steps[id.index()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 24 + store.num_scalars() * 24);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (id, p) in store.iter() {
        let i = id.index();
        for arr in [&p.value, &trainer.opt.m[i], &trainer.opt.v[i]] {
            for x in arr.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    let bytes = encode(trainer)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Trainer> {
    let malformed = |reason: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != b"ADMC" {
        return Err(malformed("missing ADMC magic"));
    }
    if bytes.len() < 5 || bytes[4] != CHECKPOINT_MAGIC[4] {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(5)]).into_owned(),
        });
    }
    if bytes.len() < 5 + 8 + 8 {
        return Err(malformed("truncated header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let hlen = u64::from_le_bytes(body[5..13].try_into().expect("8 bytes")) as usize;
    let json = body.get(13..13 + hlen).ok_or_else(|| malformed("header length out of range"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| malformed(&format!("header: {e}")))?;

    let mut model = AdaMorph::new(header.model.clone(), 0)?;
    if model.params.len() != header.tensors.len() {
        return Err(malformed("tensor count does not match model layout"));
    }
    let mut opt = AdamState::new(&model.params);
    let mut payload = body[13 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read = |shape: &[usize]| -> Result<Array> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = payload.by_ref().take(n).collect();
        if data.len() != n {
            return Err(malformed("payload shorter than header"));
        }
        Array::new(shape.to_vec(), data)
    };
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let p = model.params.get(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(malformed(&format!("tensor {} does not match model layout", entry.name)));
        }
        let i = id.index();
        let value = read(&entry.shape)?;
        opt.m[i] = read(&entry.shape)?;
        opt.v[i] = read(&entry.shape)?;
        opt.steps[i] = entry.adam_steps;
        let p = model.params.get_mut(id);
        p.value = value;
        p.decay = entry.decay;
    }
    if payload.next().is_some() || !(body.len() - 13 - hlen).is_multiple_of(8) {
        return Err(malformed("trailing payload bytes"));
    }
    let fingerprint = u64::from_str_radix(&header.dataset_fingerprint, 16)
        .map_err(|_| malformed("bad dataset fingerprint"))?;
    Ok(Trainer::restore(model, opt, header.stats, header.train, header.seed, header.step, fingerprint))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Parameters only, for inference.
pub fn load_model(path: &Path) -> Result<(AdaMorph, NormStats)> {
    let t = load(path)?;
    Ok((t.model, t.stats))
}

/// Whether two stores hold the same tensor names and bitwise values.
pub fn same_values(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|((_, x), (_, y))| x.name == y.name && x.value == y.value)
}
