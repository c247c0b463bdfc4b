//! Versioned checkpoint files.
//!
//! A checkpoint holds every tensor that influences future steps (online
//! parameters and normalization statistics, the momentum branch, LARS
//! momentum buffers), the next step index, the full run config and the
//! code version string.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{Trainer, CODE_VERSION};
use crate::container::{self, BlobReader, BlobWriter};
use crate::encoders::{EncoderConfig, VideoEncoder};
use crate::error::{Error, Result};
use crate::rng;

const CKPT_MAGIC: &[u8; 8] = b"CDCKPT\0\0";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    code_version: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub step: u64,
    pub code_version: String,
    pub config: RunConfig,
    /// `(group, name) -> (shape, values)`
    pub tensors: BTreeMap<(String, String), (Vec<usize>, Vec<f32>)>,
}

const ONLINE: &str = "online";
const ONLINE_BUF: &str = "online_buffer";
const MOMENTUM: &str = "momentum";
const MOMENTUM_BUF: &str = "momentum_buffer";
const LARS: &str = "lars";

pub fn save(path: &Path, t: &mut Trainer) -> Result<()> {
    let mut blob = BlobWriter::new();
    let mut tensors = Vec::new();
    let mut push = |group: &str, name: &str, shape: Vec<usize>, values: &[f32]| {
        let (offset, len) = blob.push_f32(values);
        tensors.push(TensorEntry {
            group: group.into(),
            name: name.into(),
            shape,
            offset,
            len,
        });
    };
    for p in t.online.params() {
        push(ONLINE, &p.name, p.shape.clone(), &p.value);
    }
    for (name, b) in t.online.buffers_mut() {
        push(ONLINE_BUF, &name, vec![b.len()], b);
    }
    if let Some(m) = t.momentum.as_mut() {
        for p in m.backbone.params() {
            push(MOMENTUM, &p.name, p.shape.clone(), &p.value);
        }
        for (name, b) in m.backbone.buffers_mut() {
            push(MOMENTUM_BUF, &name, vec![b.len()], b);
        }
    }
    for (name, b) in &t.lars.buffers {
        push(LARS, name, vec![b.len()], b);
    }
    let header = Header {
        step: t.step,
        code_version: CODE_VERSION.into(),
        config: serde_json::to_value(&t.cfg)?,
        tensors,
    };
    container::write_file(path, CKPT_MAGIC, &header, &blob.into_bytes())
}

pub fn read(path: &Path) -> Result<CheckpointData> {
    let (h, blob): (Header, _) = container::read_file(path, CKPT_MAGIC)?;
    let reader = BlobReader::new(&blob);
    let mut tensors = BTreeMap::new();
    for e in h.tensors {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Format(format!("tensor {}/{} shape {:?} vs {} values", e.group, e.name, e.shape, e.len)));
        }
        let values = reader.f32s(e.offset, e.len)?;
        tensors.insert((e.group, e.name), (e.shape, values));
    }
    let config: RunConfig = serde_json::from_value(h.config)?;
    Ok(CheckpointData {
        step: h.step,
        code_version: h.code_version,
        config,
        tensors,
    })
}

fn take(
    tensors: &mut BTreeMap<(String, String), (Vec<usize>, Vec<f32>)>,
    group: &str,
    name: &str,
    shape: &[usize],
) -> Result<Vec<f32>> {
    let (s, v) = tensors
        .remove(&(group.to_string(), name.to_string()))
        .ok_or_else(|| Error::Format(format!("checkpoint lacks {group}/{name}")))?;
    if s != shape {
        return Err(Error::Format(format!("{group}/{name}: checkpoint shape {s:?}, model shape {shape:?}")));
    }
    Ok(v)
}

/// Rebuild the trainer saved in `path`, ready to run its next step.
pub fn restore(path: &Path) -> Result<Trainer> {
    let mut data = read(path)?;
    let mut t = Trainer::new(data.config.clone())?;
    let tensors = &mut data.tensors;
    for p in t.online.params_mut() {
        p.value = take(tensors, ONLINE, &p.name, &p.shape)?;
    }
    for (name, b) in t.online.buffers_mut() {
        *b = take(tensors, ONLINE_BUF, &name, &[b.len()])?;
    }
    if let Some(m) = t.momentum.as_mut() {
        for p in m.backbone.params_mut() {
            p.value = take(tensors, MOMENTUM, &p.name, &p.shape)?;
        }
        for (name, b) in m.backbone.buffers_mut() {
            *b = take(tensors, MOMENTUM_BUF, &name, &[b.len()])?;
        }
    }
    let lars_names: Vec<String> = tensors
        .keys()
        .filter(|(g, _)| g == LARS)
        .map(|(_, n)| n.clone())
        .collect();
    let sizes: BTreeMap<String, usize> = t.online.params().iter().map(|p| (p.name.clone(), p.numel())).collect();
    for name in lars_names {
        let n = *sizes
            .get(&name)
            .ok_or_else(|| Error::Format(format!("optimizer state for unknown parameter {name}")))?;
        let v = take(tensors, LARS, &name, &[n])?;
        t.lars.buffers.insert(name, v);
    }
    if let Some(((g, n), _)) = tensors.iter().next() {
        return Err(Error::Format(format!("checkpoint tensor {g}/{n} does not belong to this model")));
    }
    t.step = data.step;
    t.online.step = data.step;
    Ok(t)
}

/// The online video encoder stored in a checkpoint, built with `cfg`.
/// Returns the encoder and the checkpoint's step.
pub fn load_encoder(path: &Path, cfg: &EncoderConfig) -> Result<(VideoEncoder<f32>, u64)> {
    let mut data = read(path)?;
    let mut enc = VideoEncoder::new(cfg, &mut rng::stream(0, &[]));
    let tensors = &mut data.tensors;
    for p in enc.params_mut() {
        p.value = take(tensors, ONLINE, &p.name, &p.shape)?;
    }
    for (name, b) in enc.buffers_mut() {
        *b = take(tensors, ONLINE_BUF, &name, &[b.len()])?;
    }
    Ok((enc, data.step))
}
