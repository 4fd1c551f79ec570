//! Checkpoint files.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, little-endian `f64` payload, SHA-256 of everything before it.
//! The header lists every tensor (name, role, shape) in payload order.

use std::fs;
use std::path::Path;

use mafnet_autograd::{ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, Moments, Progress, Result, TrainConfig, TrainError, TrainState};
use crate::models::ModelConfig;

const MAGIC: &[u8; 8] = b"MAFNETCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Generator,
    Discriminator,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    /// Adam update count, on `AdamM` entries only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    progress: Progress,
    rng: ChaCha8Rng,
    best_val_dice: Option<f64>,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    tensors: Vec<Entry>,
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::CorruptFile(msg.into())
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut items: Vec<(&str, Role, &Tensor, Option<u64>)> = Vec::new();
    items.extend(state.gen.iter().map(|(n, t)| (n, Role::Generator, t, None)));
    items.extend(state.disc.iter().map(|(n, t)| (n, Role::Discriminator, t, None)));
    for (name, m) in &state.adam.moments {
        items.push((name, Role::AdamM, &m.m, Some(m.t)));
        items.push((name, Role::AdamV, &m.v, None));
    }
    let entries = items
        .iter()
        .map(|&(name, role, t, count)| Entry {
            name: name.to_string(),
            role,
            shape: t.shape().to_vec(),
            t: count,
        })
        .collect();
    let payload: Vec<&Tensor> = items.iter().map(|&(_, _, t, _)| t).collect();
    let header = Header {
        model_config: state.model_config.clone(),
        train_config: state.config.clone(),
        progress: state.progress.clone(),
        rng: state.rng.clone(),
        best_val_dice: state.best_val_dice,
        adam_beta1: state.adam.beta1,
        adam_beta2: state.adam.beta2,
        adam_eps: state.adam.eps,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let n_values: usize = payload.iter().map(|t| t.numel()).sum();
    let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len() + 8 * n_values + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in payload {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < PREAMBLE_LEN + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE_LEN
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header =
        serde_json::from_slice(&body[PREAMBLE_LEN..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;

    let mut values = body[header_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if (body.len() - header_end) != 8 * expected {
        return Err(corrupt("payload size does not match the tensor list"));
    }

    let mut gen = ParamStore::new();
    let mut disc = ParamStore::new();
    let mut adam = Adam::new(
        header.train_config.rates(),
        header.adam_beta1,
        header.adam_beta2,
        header.adam_eps,
    );
    let mut pending_m: Option<(String, Tensor, u64)> = None;
    for e in header.tensors {
        let n = e.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| corrupt(err.to_string()))?;
        match e.role {
            Role::Generator => {
                gen.insert(e.name, t);
            }
            Role::Discriminator => {
                disc.insert(e.name, t);
            }
            Role::AdamM => {
                let count = e.t.ok_or_else(|| corrupt("moment entry without a step count"))?;
                pending_m = Some((e.name, t, count));
            }
            Role::AdamV => match pending_m.take() {
                Some((name, m, count)) if name == e.name => {
                    adam.moments.insert(name, Moments { m, v: t, t: count });
                }
                _ => return Err(corrupt(format!("second moment of `{}` without a first", e.name))),
            },
        }
    }
    if pending_m.is_some() {
        return Err(corrupt("unpaired first moment"));
    }
    Ok(TrainState {
        model_config: header.model_config,
        config: header.train_config,
        gen,
        disc,
        adam,
        rng: header.rng,
        progress: header.progress,
        best_val_dice: header.best_val_dice,
    })
}

/// Writes to a sibling temporary file first, so an interrupted save never
/// leaves a half-written checkpoint behind.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, to_bytes(state)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and checks it was written for `model` and `config`.
pub fn load_matching(path: impl AsRef<Path>, model: &ModelConfig, config: Option<&TrainConfig>) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if &state.model_config != model {
        return Err(TrainError::VersionMismatch("model configuration differs".into()));
    }
    if let Some(c) = config {
        if &state.config != c {
            return Err(TrainError::VersionMismatch("training configuration differs".into()));
        }
    }
    Ok(state)
}
