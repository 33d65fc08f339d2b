//! Checkpoints are safetensors files. Every model tensor is stored under its
//! parameter name, the Adam moments under `optim.m.<name>` and
//! `optim.v.<name>`, all as little-endian f32. The header metadata holds the
//! run configuration (`config`, TOML), the loop state (`state`, JSON), the
//! per-tensor Adam step counts (`optim_steps`) and the prototypes' initial
//! half extents (`init_half_extents`).

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::{Adam, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::Model;

pub const FORMAT_TAG: &str = "protoscene-checkpoint/1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
    pub model: Model,
    pub optim: Adam,
}

fn to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn from_bytes(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn checkpoint_bytes(config: &TrainConfig, state: &TrainState, model: &Model, optim: &Adam) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (i, (_, p)) in model.store.iter().enumerate() {
        tensors.push((p.name.clone(), p.shape.clone(), to_bytes(&p.data)));
        tensors.push((format!("optim.m.{}", p.name), p.shape.clone(), to_bytes(&optim.m[i])));
        tensors.push((format!("optim.v.{}", p.name), p.shape.clone(), to_bytes(&optim.v[i])));
    }
    let views = tensors
        .iter()
        .map(|(n, s, b)| Ok((n.as_str(), TensorView::new(Dtype::F32, s.clone(), b).map_err(ckpt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([
        ("format".to_string(), FORMAT_TAG.to_string()),
        ("config".to_string(), config.to_toml()),
        ("state".to_string(), serde_json::to_string(state).map_err(ckpt_err)?),
        ("optim_steps".to_string(), serde_json::to_string(&optim.steps).map_err(ckpt_err)?),
        ("init_half_extents".to_string(), serde_json::to_string(&model.init_extents).map_err(ckpt_err)?),
    ]);
    let bytes = safetensors::serialize(views, &Some(meta)).map_err(ckpt_err)?;
    canonical_header(bytes)
}

/// Rewrites the JSON header with sorted keys. The metadata map is hashed,
/// so without this two identical checkpoints could differ byte-wise.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte length prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).map_err(ckpt_err)?;
    let mut text = serde_json::to_vec(&header).map_err(ckpt_err)?;
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text);
    out.extend(&bytes[8 + n..]);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState, model: &Model, optim: &Adam) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(config, state, model, optim)?)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(Error::Checkpoint("not a protoscene checkpoint".into()));
    }
    let field = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("metadata `{k}` missing")));
    let config = TrainConfig::from_toml(field("config")?)?;
    let state: TrainState = serde_json::from_str(field("state")?).map_err(ckpt_err)?;
    let optim_steps: Vec<u64> = serde_json::from_str(field("optim_steps")?).map_err(ckpt_err)?;
    let init_extents: Vec<[f64; 3]> = serde_json::from_str(field("init_half_extents")?).map_err(ckpt_err)?;
    let tensors = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
    let mut model = Model::new(config.model.clone(), config.seed)?;
    model.stage = state.stage;
    if init_extents.len() != model.num_prototypes() {
        return Err(Error::Checkpoint("initial extents do not match the prototype count".into()));
    }
    model.init_extents = init_extents;
    let mut optim = Adam::new(&model.store, config.weight_decay);
    let read = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let t = tensors.tensor(name).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if t.dtype() != Dtype::F32 || t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: expected f32 {shape:?}, found {:?} {:?}",
                t.dtype(),
                t.shape()
            )));
        }
        Ok(from_bytes(t.data()))
    };
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone(), p.shape.clone())).collect();
    for (i, (id, name, shape)) in ids.into_iter().enumerate() {
        model.store.get_mut(id).data = read(&name, &shape)?;
        optim.m[i] = read(&format!("optim.m.{name}"), &shape)?;
        optim.v[i] = read(&format!("optim.v.{name}"), &shape)?;
    }
    if optim_steps.len() != optim.steps.len() {
        return Err(Error::Checkpoint("optimizer step counts do not match the model".into()));
    }
    optim.steps = optim_steps;
    Ok(Checkpoint {
        config,
        state,
        model,
        optim,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// File name of the checkpoint written after `epoch` of `stage`.
pub fn checkpoint_name(stage: u8, epoch: usize) -> String {
    format!("ckpt_stage{stage}_epoch{epoch}.safetensors")
}

/// The most advanced checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<std::path::PathBuf> {
    let mut best: Option<((u8, usize), std::path::PathBuf)> = None;
    for entry in std::fs::read_dir(run_dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(rest) = name.strip_prefix("ckpt_stage").and_then(|r| r.strip_suffix(".safetensors")) else {
            continue;
        };
        let Some((s, e)) = rest.split_once("_epoch") else {
            continue;
        };
        if let (Ok(s), Ok(e)) = (s.parse::<u8>(), e.parse::<usize>()) {
            if best.as_ref().map_or(true, |(k, _)| (s, e) > *k) {
                best = Some(((s, e), path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint in {}", run_dir.display())))
}
