//! The epoch loop over `<data.root>/trainR` and `<data.root>/trainN`.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use derain_tensor::Real;

use super::checkpoint::{epoch_dir, load_state, save_checkpoint};
use super::config::TrainConfig;
use super::step::{StepMetrics, TrainState, Trainer};
use crate::data::UnpairedSampler;
use crate::error::{DerainError, Result};

/// Environment switch that forces deterministic mode.
pub const DETERMINISTIC_ENV: &str = "DERAIN_DETERMINISTIC";

/// Runtime options that are not part of the model configuration.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint directory.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (checkpointing first).
    pub stop_after_epoch: Option<usize>,
    /// Stop once this many iterations are complete, even mid-epoch.
    pub max_iterations: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub last_metrics: Option<StepMetrics>,
    pub epochs_completed: usize,
}

pub fn env_deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).map(|v| v == "1" || v.eq_ignore_ascii_case("true")).unwrap_or(false)
}

/// Trains in f32.
pub fn fit(cfg: &TrainConfig, opts: &FitOptions) -> Result<FitOutcome> {
    fit_with::<f32>(cfg, opts)
}

pub fn fit_with<T: Real>(cfg: &TrainConfig, opts: &FitOptions) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if env_deterministic() {
        cfg.training.deterministic = true;
    }
    let root = Path::new(&cfg.data.root);
    let mut sampler = UnpairedSampler::new(&root.join("trainR"), &root.join("trainN"), cfg.training.crop, cfg.training.hflip)?;

    let out = &opts.out_dir;
    std::fs::create_dir_all(out).map_err(|e| DerainError::io(out, e))?;
    let cfg_path = out.join("resolved.cfg");
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| DerainError::io(&cfg_path, e))?;

    let state: TrainState<T> = match &opts.resume {
        Some(dir) => load_state(dir, &cfg)?,
        None => TrainState::new(&cfg)?,
    };
    let metrics_path = out.join("metrics.jsonl");
    let kept = if opts.resume.is_some() { read_metrics_upto(&metrics_path, state.iteration)? } else { Vec::new() };
    let file = std::fs::File::create(&metrics_path).map_err(|e| DerainError::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    for line in &kept {
        writeln!(log, "{line}").map_err(|e| DerainError::io(&metrics_path, e))?;
    }

    let deterministic = cfg.training.deterministic;
    let mut trainer = Trainer::from_state(cfg.clone(), state, deterministic);
    let batch_size = cfg.training.batch_size;
    let iters = sampler.epoch_len().div_ceil(batch_size);
    let total = cfg.training.epochs_total;
    let stop = opts.stop_after_epoch.unwrap_or(total).min(total);
    let mut last = None;
    let mut last_ckpt = None;

    let cap = opts.max_iterations.unwrap_or(u64::MAX);
    let mut capped = false;

    while trainer.state.epoch < stop {
        let epoch = trainer.state.epoch;
        log::info!("epoch {epoch}: {iters} iterations at lr {:.3e}", super::schedule::lr_at(epoch, &cfg)?);
        for _ in 0..iters {
            if trainer.state.iteration >= cap {
                capped = true;
                break;
            }
            let batch = (0..batch_size).map(|_| sampler.next_batch(&mut trainer.state.rngs.data)).collect::<Result<Vec<_>>>()?;
            let m = trainer.train_step(&batch)?;
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(log, "{line}").map_err(|e| DerainError::io(&metrics_path, e))?;
            last = Some(m);
        }
        log.flush().map_err(|e| DerainError::io(&metrics_path, e))?;
        if capped {
            break;
        }
        trainer.state.epoch += 1;
        let done = trainer.state.epoch;
        if done.is_multiple_of(cfg.training.checkpoint_every.max(1)) || done == stop {
            let dir = epoch_dir(out, done);
            save_checkpoint(&dir, &trainer.state, &cfg)?;
            last_ckpt = Some(dir);
        }
    }
    log.flush().map_err(|e| DerainError::io(&metrics_path, e))?;

    let final_checkpoint = match last_ckpt {
        _ if capped => {
            let dir = out.join("checkpoints").join(format!("iter-{:07}", trainer.state.iteration));
            save_checkpoint(&dir, &trainer.state, &cfg)?;
            dir
        }
        Some(_) if trainer.state.epoch == total => {
            let fin = out.join("checkpoints").join("final");
            save_checkpoint(&fin, &trainer.state, &cfg)?;
            fin
        }
        Some(dir) => dir,
        None => {
            let dir = epoch_dir(out, trainer.state.epoch);
            save_checkpoint(&dir, &trainer.state, &cfg)?;
            dir
        }
    };
    Ok(FitOutcome { final_checkpoint, metrics_path, last_metrics: last, epochs_completed: trainer.state.epoch })
}

/// Lines of an existing log whose iteration precedes `upto`.
fn read_metrics_upto(path: &Path, upto: u64) -> Result<Vec<String>> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(DerainError::io(path, e)),
    };
    let mut kept = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| DerainError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line).map_err(|e| DerainError::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })?;
        if m.iteration < upto {
            kept.push(line);
        }
    }
    Ok(kept)
}

/// Parses a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    read_metrics_upto(path, u64::MAX)?
        .iter()
        .map(|l| serde_json::from_str(l).map_err(|e| DerainError::Checkpoint { path: path.to_path_buf(), reason: e.to_string() }))
        .collect()
}
