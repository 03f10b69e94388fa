//! Small-scale end-to-end protocol: synthesize procedural scenes, train a toy
//! model for a fixed number of iterations and score it on a held-out split.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::evaluation::{evaluate_dir, EvalReport, GeneratorRestorer};
use crate::rain::{write_training_layout, RainSynthesisParams, SplitCounts};
use crate::training::{fit, FitOptions, TrainConfig};

pub const DESK_SIZE: usize = 64;
pub const DESK_SPLIT: SplitCounts = SplitCounts { train_rainy: 90, train_clean: 90, test: 20 };
pub const DESK_ITERATIONS: u64 = 2000;

/// Writes the 200-scene unpaired layout under `root`.
pub fn prepare_desk_data(root: &Path, rain_seed: u64) -> Result<()> {
    write_training_layout(root, DESK_SPLIT, DESK_SIZE, &RainSynthesisParams::default().with_seed(rain_seed))?;
    Ok(())
}

/// Toy configuration: 16 base channels, 2 residual blocks, 2 taps, 64 locations.
pub fn toy_config(seed: u64, data_root: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.arch.base_channels = 16;
    cfg.arch.n_res_blocks = 2;
    cfg.arch.tap_layers = vec![0, 4];
    cfg.arch.proj_dim = 64;
    cfg.arch.proj_hidden = 64;
    cfg.contrastive.n_locations = 64;
    cfg.contrastive.n_external = 64;
    cfg.training.crop = DESK_SIZE;
    cfg.training.seed = seed;
    let per_epoch = DESK_SPLIT.train_rainy.max(DESK_SPLIT.train_clean) as u64;
    cfg.training.epochs_total = DESK_ITERATIONS.div_ceil(per_epoch) as usize;
    cfg.training.epochs_const_lr = cfg.training.epochs_total / 2;
    cfg.training.checkpoint_every = cfg.training.epochs_total;
    cfg.training.deterministic = true;
    cfg.data.root = data_root.display().to_string();
    cfg
}

#[derive(Clone, Debug)]
pub struct DeskOutcome {
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

impl DeskOutcome {
    /// Mean PSNR(derained, clean) minus mean PSNR(rainy, clean).
    pub fn gain_db(&self) -> f64 {
        self.report.mean_gain_db()
    }
}

/// Trains `cfg` for `iterations` steps into `out` and evaluates on `testR`/`testGT`.
pub fn run_desk(cfg: &TrainConfig, out: &Path, iterations: u64) -> Result<DeskOutcome> {
    let opts = FitOptions { out_dir: out.to_path_buf(), max_iterations: Some(iterations), ..Default::default() };
    let outcome = fit(cfg, &opts)?;
    let restorer = GeneratorRestorer::from_checkpoint(&outcome.final_checkpoint)?;
    let root = Path::new(&cfg.data.root);
    let report = evaluate_dir(&restorer, &root.join("testR"), &root.join("testGT"))?;
    report.write_json(&out.join("report.json"))?;
    Ok(DeskOutcome { checkpoint: outcome.final_checkpoint, report })
}
