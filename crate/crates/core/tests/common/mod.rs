#![allow(dead_code)]

pub mod criteria;
pub mod oracle;

use derain_core::image::ImageTensor;
use derain_core::networks::ArchConfig;
use derain_core::training::TrainConfig;
use derain_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> ImageTensor {
    ImageTensor::new(3, h, w, (0..3 * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Smallest architecture exercising every layer kind.
pub fn tiny_arch(base: usize) -> ArchConfig {
    ArchConfig { base_channels: base, n_res_blocks: 1, tap_layers: ArchConfig::default_taps(1), proj_dim: 8, proj_hidden: 8, ..Default::default() }
}

/// Tiny, fast training configuration over `root` (trainR/, trainN/).
pub fn tiny_train_config(root: &std::path::Path, crop: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.arch = tiny_arch(4);
    cfg.contrastive.n_locations = 8;
    cfg.contrastive.n_external = 8;
    cfg.training.crop = crop;
    cfg.training.epochs_total = 2;
    cfg.training.epochs_const_lr = 1;
    cfg.training.checkpoint_every = 1;
    cfg.training.image_pool_size = 2;
    cfg.training.freq_scale = derain_core::losses::FrequencyScale::PerPixel;
    cfg.training.deterministic = true;
    cfg.data.root = root.display().to_string();
    cfg
}

/// Writes an unpaired layout of `count` rainy and `count` clean scenes.
pub fn tiny_dataset(root: &std::path::Path, count: usize, size: usize) {
    use derain_core::rain::{write_training_layout, RainSynthesisParams, SplitCounts};
    write_training_layout(root, SplitCounts { train_rainy: count, train_clean: count, test: 2 }, size, &RainSynthesisParams::default()).unwrap();
}
