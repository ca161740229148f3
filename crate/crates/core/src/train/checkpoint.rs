//! Binary checkpoint format.
//!
//! Layout: the 5-byte magic `MVSQ1`, a little-endian `u64` header length,
//! a UTF-8 JSON [`Header`], the tensor payload region, and a little-endian
//! CRC-32 of the payload region. Tensor offsets are relative to the start
//! of the payload and tensors are stored back to back in index order.
//! Optimizer moments are stored as ordinary tensors named `adam.m/<param>`
//! and `adam.v/<param>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, Moments, OptimizerState, Schedule};
use crate::error::{Error, Result};
use crate::model::{layout, ModelConfig, MultiViewInit, Params};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MVSQ1";
const PREFIX: usize = MAGIC.len() + 8;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Phase1Conventional,
    Phase2MultiView,
    /// A multi-view model trained from initialization, without phase 1.
    MultiViewFromScratch,
}

/// A model together with everything needed to resume or continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub phase: Phase,
    /// Updates applied in the current phase.
    pub step: u64,
    /// Updates applied in earlier phases.
    pub prior_steps: u64,
    /// Seed of the run that produced this state.
    pub seed: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn total_steps(&self) -> u64 {
        self.prior_steps + self.step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub phase: Phase,
    pub step: u64,
    pub prior_steps: u64,
    pub seed: u64,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub adam: AdamConfig,
    pub schedule: Schedule,
    pub step: u64,
    /// Update count of every parameter that has moments.
    pub param_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
    /// CRC-32 of this tensor's bytes, so corruption can be attributed.
    pub crc32: u32,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serialize a checkpoint to bytes.
pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Tensor<T>)> = ckpt.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    let optimizer = ckpt.optimizer.as_ref().map(|opt| {
        for (name, slot) in &opt.slots {
            named.push((format!("{M_PREFIX}{name}"), &slot.m));
        }
        for (name, slot) in &opt.slots {
            named.push((format!("{V_PREFIX}{name}"), &slot.v));
        }
        OptimizerMeta {
            adam: opt.adam,
            schedule: opt.schedule,
            step: opt.step,
            param_steps: opt.slots.iter().map(|(n, s)| (n.clone(), s.step)).collect(),
        }
    });

    let mut payload = Vec::with_capacity(named.iter().map(|(_, t)| t.len() * T::BYTES).sum());
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let start = payload.len();
        for &x in t.data() {
            x.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name,
            dtype: T::PRECISION.dtype_name().to_string(),
            shape: t.shape().to_vec(),
            byte_offset: start as u64,
            byte_len: (payload.len() - start) as u64,
            crc32: crc32fast::hash(&payload[start..]),
        });
    }
    let header = Header {
        config: ckpt.config.clone(),
        phase: ckpt.phase,
        step: ckpt.step,
        prior_steps: ckpt.prior_steps,
        seed: ckpt.seed,
        optimizer,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < PREFIX || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[MAGIC.len()..PREFIX]);
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("corrupt header length"))?;
    let end = PREFIX
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {len} exceeds file size {}", bytes.len())))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX..end]).map_err(|e| bad(format!("corrupt header: {e}")))?;
    Ok((header, end))
}

/// Parse a checkpoint, verifying structure and checksums.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, start) = split_header(bytes)?;
    if bytes.len() < start + 4 {
        return Err(bad("truncated file: missing payload checksum"));
    }
    let payload = &bytes[start..bytes.len() - 4];
    let mut crc = [0u8; 4];
    crc.copy_from_slice(&bytes[bytes.len() - 4..]);
    let stored_crc = u32::from_le_bytes(crc);

    let dtype = T::PRECISION.dtype_name();
    if header.config.precision != T::PRECISION {
        return Err(bad(format!(
            "checkpoint holds {} tensors, requested {dtype}",
            header.config.precision.dtype_name()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut expected_offset = 0u64;
    let mut tensors: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for e in &header.tensors {
        let name = &e.name;
        if !seen.insert(name.as_str()) {
            return Err(bad(format!("tensor `{name}` appears more than once")));
        }
        if e.dtype != dtype {
            return Err(bad(format!("tensor `{name}`: dtype {} where {dtype} was expected", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_len != (numel * T::BYTES) as u64 {
            return Err(bad(format!(
                "tensor `{name}`: shape {:?} needs {} bytes, index says {}",
                e.shape,
                numel * T::BYTES,
                e.byte_len
            )));
        }
        if e.byte_offset != expected_offset {
            return Err(bad(format!(
                "tensor `{name}`: offset {} where {expected_offset} was expected",
                e.byte_offset
            )));
        }
        let end = e.byte_offset + e.byte_len;
        if end > payload.len() as u64 {
            return Err(bad(format!(
                "tensor `{name}`: truncated data ({} of {} bytes present)",
                (payload.len() as u64).saturating_sub(e.byte_offset),
                e.byte_len
            )));
        }
        let raw = &payload[e.byte_offset as usize..end as usize];
        if crc32fast::hash(raw) != e.crc32 {
            return Err(bad(format!("tensor `{name}`: checksum mismatch (corrupted data)")));
        }
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.insert(name.clone(), Tensor::new(&e.shape, data)?);
        expected_offset = end;
    }
    if expected_offset != payload.len() as u64 {
        return Err(bad(format!(
            "payload holds {} bytes but the index covers {expected_offset}",
            payload.len()
        )));
    }
    if crc32fast::hash(payload) != stored_crc {
        return Err(bad("payload checksum mismatch"));
    }

    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut params = Params::new();
    for (name, t) in tensors {
        if let Some(p) = name.strip_prefix(M_PREFIX) {
            m.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            v.insert(p.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    params
        .check_layout(&layout(&header.config, MultiViewInit::Zero))
        .map_err(|e| bad(format!("parameters do not match the stored config: {e}")))?;

    let optimizer = match header.optimizer {
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(bad("moment tensors present without optimizer metadata")),
        Some(meta) => {
            let mut slots = BTreeMap::new();
            for (name, step) in meta.param_steps {
                let (Some(mt), Some(vt)) = (m.remove(&name), v.remove(&name)) else {
                    return Err(bad(format!("tensor `{name}`: optimizer moments missing")));
                };
                slots.insert(name, Moments { m: mt, v: vt, step });
            }
            if let Some(name) = m.keys().chain(v.keys()).next() {
                return Err(bad(format!("tensor `{name}`: moments without a step count")));
            }
            let opt = OptimizerState {
                adam: meta.adam,
                schedule: meta.schedule,
                step: meta.step,
                slots,
            };
            opt.check_against(&params)
                .map_err(|e| bad(format!("optimizer state does not match parameters: {e}")))?;
            Some(opt)
        }
    };
    Ok(Checkpoint {
        config: header.config,
        params,
        optimizer,
        phase: header.phase,
        step: header.step,
        prior_steps: header.prior_steps,
        seed: header.seed,
    })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(ckpt)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Read only the JSON header, e.g. to learn the precision before loading.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let mut f = fs::File::open(path)?;
    let mut prefix = [0u8; PREFIX];
    f.read_exact(&mut prefix).map_err(|_| bad("truncated file"))?;
    let mut len = [0u8; 8];
    len.copy_from_slice(&prefix[MAGIC.len()..]);
    let len = u64::from_le_bytes(len);
    let mut rest = Vec::new();
    f.take(len).read_to_end(&mut rest)?;
    let mut bytes = prefix.to_vec();
    bytes.extend_from_slice(&rest);
    Ok(split_header(&bytes)?.0)
}

pub fn precision_of(path: impl AsRef<Path>) -> Result<Precision> {
    Ok(read_header(path)?.config.precision)
}

/// Element-wise mean of the parameters of several checkpoints.
///
/// The result has no optimizer state and takes its phase metadata from the
/// checkpoint with the most updates (the later one on ties).
pub fn average<T: Scalar>(ckpts: &[Checkpoint<T>]) -> Result<Checkpoint<T>> {
    let newest = ckpts
        .iter()
        .enumerate()
        .max_by_key(|(i, c)| (c.total_steps(), *i))
        .map(|(_, c)| c)
        .ok_or_else(|| Error::contract("nothing to average"))?;
    let first = &ckpts[0];
    for (k, c) in ckpts.iter().enumerate() {
        if c.config != first.config {
            return Err(Error::contract(format!("checkpoint {k} has a different model config")));
        }
        if c.params.len() != first.params.len() {
            return Err(Error::contract(format!("checkpoint {k} has a different parameter set")));
        }
        for (name, t) in c.params.iter() {
            let r = first
                .params
                .get(name)
                .map_err(|_| Error::contract(format!("checkpoint {k} has unexpected parameter `{name}`")))?;
            if r.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "parameter `{name}` is {:?} in checkpoint {k} but {:?} in checkpoint 0",
                    t.shape(),
                    r.shape()
                )));
            }
        }
    }
    let k = ckpts.len() as f64;
    let mut params = Params::new();
    for (name, t) in first.params.iter() {
        let mut acc = vec![0.0f64; t.len()];
        for c in ckpts {
            for (a, x) in acc.iter_mut().zip(c.params.get(name)?.data()) {
                *a += x.to_f64_lossy();
            }
        }
        let data = acc.into_iter().map(|a| T::from_f64_lossy(a / k)).collect();
        params.insert(name, Tensor::new(t.shape(), data)?);
    }
    Ok(Checkpoint {
        config: first.config.clone(),
        params,
        optimizer: None,
        phase: newest.phase,
        step: newest.step,
        prior_steps: newest.prior_steps,
        seed: newest.seed,
    })
}

pub fn average_checkpoints<T: Scalar, P: AsRef<Path>>(paths: &[P]) -> Result<Checkpoint<T>> {
    let ckpts = paths.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
    average(&ckpts)
}
