//! Single-file checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                  |
//! |--------|------|------------------------------------------|
//! | 0      | 8    | magic `ATINETCK`                         |
//! | 8      | 4    | format version (`u32`)                   |
//! | 12     | 8    | header length `n` in bytes (`u64`)       |
//! | 20     | n    | UTF-8 JSON [`Header`]                    |
//! | 20 + n | ...  | `f32` payload; tensor offsets are in elements from here |
//!
//! The payload holds every parameter, every batch-norm buffer and the Adam
//! moment vectors, in the order listed by the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, Error, Result};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::nn::{Adam, AdamSlot};
use crate::objectives::DwaState;
use crate::tensor::Tensor;
use crate::trainer::{RunLog, TrainConfig};

pub const MAGIC: &[u8; 8] = b"ATINETCK";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    pub config_hash: String,
    pub epoch: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dwa: Option<DwaState>,
    pub log: RunLog,
    /// Adam step count per parameter name with optimizer state.
    pub adam_steps: Vec<(String, u64)>,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: usize,
}

/// Everything needed to resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: TrainConfig,
    pub adam: Adam,
    pub dwa: Option<DwaState>,
    pub log: RunLog,
    pub epoch: usize,
}

/// Hex SHA-256 of the canonical JSON form of a model configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    Sha256::digest(json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn save(
    path: &Path,
    model: &Model,
    train: &TrainConfig,
    adam: &Adam,
    dwa: Option<&DwaState>,
    log: &RunLog,
    epoch: usize,
) -> Result<()> {
    let mut payload: Vec<f32> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, kind: EntryKind, t: &Tensor, payload: &mut Vec<f32>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend_from_slice(t.data());
    };
    for p in model.store.params() {
        push(&p.name, EntryKind::Param, p.value(), &mut payload);
    }
    for b in model.store.buffers() {
        push(&b.name, EntryKind::Buffer, &b.value, &mut payload);
    }
    let mut adam_steps = Vec::new();
    for (p, slot) in model.store.params().iter().zip(adam.slots()) {
        if let Some(s) = slot {
            let shape = p.value().shape();
            push(
                &p.name,
                EntryKind::AdamM,
                &Tensor::from_vec(shape, s.m.clone())?,
                &mut payload,
            );
            push(
                &p.name,
                EntryKind::AdamV,
                &Tensor::from_vec(shape, s.v.clone())?,
                &mut payload,
            );
            adam_steps.push((p.name.clone(), s.step));
        }
    }
    let header = Header {
        kind: model.kind(),
        config_hash: config_hash(&model.config),
        epoch,
        model: model.config.clone(),
        train: train.clone(),
        dwa: dwa.cloned(),
        log: log.clone(),
        adam_steps,
        tensors,
        payload_len: payload.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(PREFIX_LEN + json.len() + 4 * payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses the fixed prefix and JSON header; returns the header and the byte
/// offset of the payload.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < PREFIX_LEN {
        return Err(format_err!(
            "checkpoint truncated at offset {} (need {PREFIX_LEN} prefix bytes)",
            bytes.len()
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err!(
            "bad magic at offset 0: {:?}",
            String::from_utf8_lossy(&bytes[..8])
        ));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err!(
            "unsupported version {version} at offset 8 (expected {VERSION})"
        ));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = PREFIX_LEN
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            format_err!(
                "header length {len} at offset 12 exceeds file size {}",
                bytes.len()
            )
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..end]).map_err(|e| {
        format_err!(
            "invalid header JSON at offset {} (line {}, column {}): {e}",
            PREFIX_LEN,
            e.line(),
            e.column()
        )
    })?;
    if config_hash(&header.model) != header.config_hash {
        return Err(format_err!(
            "config hash mismatch in header at offset {PREFIX_LEN}"
        ));
    }
    if header.model.kind != header.kind {
        return Err(format_err!(
            "header at offset {PREFIX_LEN} names kind {} but config says {}",
            header.kind,
            header.model.kind
        ));
    }
    let payload_bytes = bytes.len() - end;
    if payload_bytes != 4 * header.payload_len {
        return Err(format_err!(
            "payload at offset {end} has {payload_bytes} bytes, header declares {} f32 values",
            header.payload_len
        ));
    }
    Ok((header, end))
}

/// Loads a checkpoint. With `expected`, the stored model kind and
/// configuration must match it.
pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint {}", path.display())),
        _ => Error::io(path, e),
    })?;
    let (header, start) = read_header(&bytes)?;
    if let Some(exp) = expected {
        if exp.kind != header.kind {
            return Err(format_err!(
                "checkpoint holds a {} model (header at offset {PREFIX_LEN}), expected {}",
                header.kind,
                exp.kind
            ));
        }
        if config_hash(exp) != header.config_hash {
            return Err(format_err!("checkpoint config hash (header at offset {PREFIX_LEN}) differs from the requested configuration"));
        }
    }
    let read = |e: &TensorEntry| -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        if e.offset + n > header.payload_len {
            return Err(format_err!("tensor {} overruns the payload", e.name));
        }
        let at = start + 4 * e.offset;
        let data = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(&e.shape, data)
    };
    let mut model = Model::build(&header.model, 0)?;
    let mut adam_m = vec![None; model.store.len()];
    let mut adam_v = vec![None; model.store.len()];
    let mut seen_params = 0;
    let mut seen_buffers = 0;
    for e in &header.tensors {
        let offset = start + 4 * e.offset;
        let t = read(e)?;
        match e.kind {
            EntryKind::Param | EntryKind::AdamM | EntryKind::AdamV => {
                let id = model.store.find(&e.name).ok_or_else(|| {
                    format_err!("unknown parameter {} at offset {offset}", e.name)
                })?;
                if model.store.param(id).value().shape() != t.shape() {
                    return Err(format_err!(
                        "parameter {} at offset {offset} has shape {:?}, model expects {:?}",
                        e.name,
                        t.shape(),
                        model.store.param(id).value().shape()
                    ));
                }
                match e.kind {
                    EntryKind::Param => {
                        *model.store.param_mut(id).value_mut() = t;
                        seen_params += 1;
                    }
                    EntryKind::AdamM => adam_m[id.0] = Some(t.into_data()),
                    _ => adam_v[id.0] = Some(t.into_data()),
                }
            }
            EntryKind::Buffer => {
                let b = model
                    .store
                    .buffers_mut()
                    .iter_mut()
                    .find(|b| b.name == e.name)
                    .ok_or_else(|| format_err!("unknown buffer {} at offset {offset}", e.name))?;
                if b.value.shape() != t.shape() {
                    return Err(format_err!(
                        "buffer {} at offset {offset} has shape {:?}",
                        e.name,
                        t.shape()
                    ));
                }
                b.value = t;
                seen_buffers += 1;
            }
        }
    }
    if seen_params != model.store.len() || seen_buffers != model.store.buffers().len() {
        return Err(format_err!(
            "checkpoint holds {seen_params}/{} parameters and {seen_buffers}/{} buffers",
            model.store.len(),
            model.store.buffers().len()
        ));
    }
    let mut slots: Vec<Option<AdamSlot>> = vec![None; model.store.len()];
    for (name, step) in &header.adam_steps {
        let id = model
            .store
            .find(name)
            .ok_or_else(|| format_err!("Adam state for unknown parameter {name}"))?;
        match (adam_m[id.0].take(), adam_v[id.0].take()) {
            (Some(m), Some(v)) => slots[id.0] = Some(AdamSlot { m, v, step: *step }),
            _ => return Err(format_err!("incomplete Adam state for {name}")),
        }
    }
    Ok(Checkpoint {
        model,
        train_config: header.train,
        adam: Adam::from_slots(slots),
        dwa: header.dwa,
        log: header.log,
        epoch: header.epoch,
    })
}

/// Loads only the model, checking its kind when given.
pub fn load_model(path: &Path, kind: Option<ModelKind>) -> Result<Model> {
    let ck = load(path, None)?;
    if let Some(k) = kind {
        if ck.model.kind() != k {
            return Err(format_err!(
                "checkpoint holds a {} model (header at offset {PREFIX_LEN}), expected {k}",
                ck.model.kind()
            ));
        }
    }
    Ok(ck.model)
}
