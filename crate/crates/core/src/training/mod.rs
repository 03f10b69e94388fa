//! Optimization: configuration, schedules, the joint step, checkpoints and
//! the epoch loop.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod fit;
pub mod pool;
pub mod schedule;
pub mod step;

pub use adam::Adam;
pub use checkpoint::{load_model, load_state, read_manifest, save_checkpoint, Manifest};
pub use config::{apply_override, ContrastiveSection, DataSection, KeyDoc, Toggles, TrainConfig, TrainingSection};
pub use fit::{fit, fit_with, read_metrics, FitOptions, FitOutcome};
pub use pool::ImagePool;
pub use schedule::lr_at;
pub use step::{
    build_contrastive_sets, build_stream_sets, run_cycles, sample_stream, CyclePack, GeneratorGrads, RngStreams, StepMetrics, TrainState, Trainer,
    CODE_EPS,
};
