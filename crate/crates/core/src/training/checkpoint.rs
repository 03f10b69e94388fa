//! Checkpoint directories: `manifest.json`, `params.bin` (model tensors),
//! `state.bin` (optimizer moments and pools) and `state.json` (counters and
//! random streams).
//!
//! Tensor archives start with `DRTA`, a `u32` version and a `u32` count; each
//! entry is a length-prefixed UTF-8 name, a dtype byte (4 or 8), a `u32` rank,
//! `u64` dims and little-endian values.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use derain_tensor::{DType, Real, Tensor};
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use super::pool::ImagePool;
use super::step::{RngStreams, TrainState};
use crate::error::{DerainError, Result};
use crate::losses::LossWeights;
use crate::networks::{ArchConfig, ModelState, ParamSet};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DRTA";
const SET_NAMES: [&str; 5] = ["g_r2n", "g_n2r", "d_r", "d_n", "heads"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub arch_hash: String,
    pub iteration: u64,
    pub epoch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub dtype: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    adam_steps: Vec<Vec<u64>>,
    rngs: RngStreams,
    pool_capacity: usize,
    pool_r: usize,
    pool_n: usize,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> DerainError {
    DerainError::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn write_archive<T: Real>(path: &Path, entries: &[(String, &Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.size() as u8);
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }
    let mut f = std::fs::File::create(path).map_err(|e| DerainError::io(path, e))?;
    f.write_all(&buf).map_err(|e| DerainError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ckpt_err(self.path, "truncated archive"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads every entry, widening to f64 (exact for both stored precisions).
pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DerainError::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(ckpt_err(path, "not a tensor archive"));
    }
    let version = c.u32()?;
    if version != 1 {
        return Err(ckpt_err(path, format!("unsupported archive version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| ckpt_err(path, "bad tensor name"))?;
        let width = c.take(1)?[0] as usize;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * width)?;
        let data: Vec<f64> = match width {
            4 => f32::from_le_bytes_slice(raw).into_iter().map(f64::from).collect(),
            8 => f64::from_le_bytes_slice(raw),
            _ => return Err(ckpt_err(path, format!("unknown element width {width} for {name}"))),
        };
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

fn take_tensor<T: Real>(entries: &mut Vec<(String, Tensor<f64>)>, name: &str, shape: &[usize], path: &Path) -> Result<Tensor<T>> {
    let pos = entries.iter().position(|(n, _)| n == name).ok_or_else(|| ckpt_err(path, format!("missing tensor {name}")))?;
    let (_, t) = entries.swap_remove(pos);
    if t.shape() != shape {
        return Err(ckpt_err(path, format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t.cast())
}

fn dtype_name<T: Real>() -> &'static str {
    T::DTYPE.name()
}

/// Writes `state` to `dir`, replacing any existing checkpoint there.
pub fn save_checkpoint<T: Real>(dir: &Path, state: &TrainState<T>, cfg: &TrainConfig) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| DerainError::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| DerainError::io(&tmp, e))?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: state.model.arch.clone(),
        arch_hash: state.model.arch.hash(),
        iteration: state.iteration,
        epoch: state.epoch,
        seed: cfg.training.seed,
        weights: cfg.weights.clone(),
        dtype: dtype_name::<T>().into(),
        config: cfg.clone(),
    };
    let write_json = |name: &str, value: &dyn erased::Json| -> Result<()> {
        let path = tmp.join(name);
        std::fs::write(&path, value.to_json()).map_err(|e| DerainError::io(path, e))
    };
    write_json("manifest.json", &manifest)?;

    let mut params = Vec::new();
    for (set_name, set) in SET_NAMES.iter().zip(state.model.sets()) {
        for (name, t) in set.names().iter().zip(set.tensors()) {
            params.push((format!("{set_name}/{name}"), t));
        }
    }
    write_archive(&tmp.join("params.bin"), &params)?;

    let mut extra = Vec::new();
    for (set_name, adam) in SET_NAMES.iter().zip(&state.optimizers) {
        for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
            extra.push((format!("adam/{set_name}/m/{i}"), m));
            extra.push((format!("adam/{set_name}/v/{i}"), v));
        }
    }
    for (i, t) in state.pool_r.images().iter().enumerate() {
        extra.push((format!("pool_r/{i}"), t));
    }
    for (i, t) in state.pool_n.images().iter().enumerate() {
        extra.push((format!("pool_n/{i}"), t));
    }
    write_archive(&tmp.join("state.bin"), &extra)?;
    let meta = StateMeta {
        adam_steps: state.optimizers.iter().map(|a| a.steps.clone()).collect(),
        rngs: state.rngs.clone(),
        pool_capacity: state.pool_r.capacity(),
        pool_r: state.pool_r.images().len(),
        pool_n: state.pool_n.images().len(),
    };
    write_json("state.json", &meta)?;

    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| DerainError::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| DerainError::io(dir, e))
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> String;
    }

    impl<S: serde::Serialize> Json for S {
        fn to_json(&self) -> String {
            serde_json::to_string_pretty(self).expect("serializable")
        }
    }
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| DerainError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = read_json(&path)?;
    if m.format_version != FORMAT_VERSION {
        return Err(ckpt_err(&path, format!("format version {} is not {FORMAT_VERSION}", m.format_version)));
    }
    if m.arch.hash() != m.arch_hash {
        return Err(ckpt_err(&path, "arch hash does not match the recorded architecture"));
    }
    Ok(m)
}

/// Loads the model; with `expected` set, rejects a different architecture.
pub fn load_model<T: Real>(dir: &Path, expected: Option<&ArchConfig>) -> Result<(ModelState<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    if let Some(arch) = expected {
        if arch.hash() != manifest.arch_hash {
            return Err(ckpt_err(dir, format!("arch hash mismatch: checkpoint {} vs requested {}", manifest.arch_hash, arch.hash())));
        }
    }
    let path = dir.join("params.bin");
    let mut entries = read_archive(&path)?;
    let mut model: ModelState<T> = crate::networks::init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0), &manifest.arch)?;
    for (set_name, set) in SET_NAMES.iter().zip(model.sets_mut()) {
        fill(set, set_name, &mut entries, &path)?;
    }
    Ok((model, manifest))
}

fn fill<T: Real>(set: &mut ParamSet<T>, set_name: &str, entries: &mut Vec<(String, Tensor<f64>)>, path: &Path) -> Result<()> {
    for i in 0..set.len() {
        let name = format!("{set_name}/{}", set.names()[i]);
        let shape = set.tensor(i).shape().to_vec();
        *set.tensor_mut(i) = take_tensor(entries, &name, &shape, path)?;
    }
    Ok(())
}

/// Loads everything needed to continue training bit-exactly.
pub fn load_state<T: Real>(dir: &Path, cfg: &TrainConfig) -> Result<TrainState<T>> {
    let (model, manifest) = load_model::<T>(dir, Some(&cfg.arch))?;
    if manifest.dtype != dtype_name::<T>() {
        return Err(ckpt_err(dir, format!("stored dtype {} differs from {}", manifest.dtype, dtype_name::<T>())));
    }
    let meta: StateMeta = read_json(&dir.join("state.json"))?;
    let path = dir.join("state.bin");
    let mut entries = read_archive(&path)?;
    let mut optimizers = model.sets().map(|s| Adam::new(s, cfg.training.adam_beta1, cfg.training.adam_beta2));
    for ((set_name, adam), steps) in SET_NAMES.iter().zip(optimizers.iter_mut()).zip(&meta.adam_steps) {
        if steps.len() != adam.steps.len() {
            return Err(ckpt_err(&path, format!("optimizer state for {set_name} has the wrong length")));
        }
        adam.steps = steps.clone();
        for i in 0..adam.m.len() {
            let shape = adam.m[i].shape().to_vec();
            adam.m[i] = take_tensor(&mut entries, &format!("adam/{set_name}/m/{i}"), &shape, &path)?;
            adam.v[i] = take_tensor(&mut entries, &format!("adam/{set_name}/v/{i}"), &shape, &path)?;
        }
    }
    let mut pool = |prefix: &str, count: usize| -> Result<Vec<Tensor<T>>> {
        (0..count)
            .map(|i| {
                let name = format!("{prefix}/{i}");
                let shape = entries
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t.shape().to_vec())
                    .ok_or_else(|| ckpt_err(&path, format!("missing {name}")))?;
                take_tensor(&mut entries, &name, &shape, &path)
            })
            .collect()
    };
    let pool_r = ImagePool::restore(meta.pool_capacity, pool("pool_r", meta.pool_r)?);
    let pool_n = ImagePool::restore(meta.pool_capacity, pool("pool_n", meta.pool_n)?);
    Ok(TrainState { model, optimizers, iteration: manifest.iteration, epoch: manifest.epoch, rngs: meta.rngs, pool_r, pool_n })
}

/// `checkpoints/epoch-NNNN` under an output directory.
pub fn epoch_dir(out: &Path, epochs_done: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch-{epochs_done:04}"))
}

/// Name of the precision a checkpoint stores.
pub fn stored_dtype(manifest: &Manifest) -> Option<DType> {
    match manifest.dtype.as_str() {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}
