use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::list_images;
use crate::error::{DerainError, Result};
use crate::image::load_image;
use crate::networks::{Cgb, Direction, ModelState, Role};

#[derive(Clone, Debug)]
pub struct EmbeddingOptions {
    /// Locations drawn per image; clipped to the feature-map size.
    pub n_samples: usize,
    pub seed: u64,
    /// Tap layer to read; the deepest configured tap when `None`.
    pub layer: Option<usize>,
}

/// CSV with a `stream` label column followed by one column per code
/// dimension. Rainy images are encoded by the rain-to-clean generator and
/// labelled `rainy`; clean images by the clean-to-rain generator, `clean`.
/// Codes are L2-normalized.
pub fn export_embeddings(model: &ModelState<f32>, rainy_dir: &Path, clean_dir: &Path, opts: &EmbeddingOptions) -> Result<String> {
    let layer = match opts.layer {
        Some(l) => l,
        None => *model.arch.tap_layers.iter().max().ok_or_else(|| DerainError::Config("architecture has no tap layers".into()))?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dim = model.arch.proj_dim;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| DerainError::Config(format!("csv: {e}"));
    let header: Vec<String> = std::iter::once("stream".to_string()).chain((0..dim).map(|i| format!("c{i}"))).collect();
    w.write_record(&header).map_err(csv_err)?;

    let streams = [("rainy", rainy_dir, Direction::RainToClean, Cgb::Forward), ("clean", clean_dir, Direction::CleanToRain, Cgb::Backward)];
    let mut warned = false;
    for (label, dir, direction, cgb) in streams {
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(DerainError::Config(format!("no images in {}", dir.display())));
        }
        for file in files {
            let img = load_image(&file)?;
            let stack = model.generator_encode(direction, img.tensor(), &[layer])?;
            let shape = stack.layers[0].1.shape().to_vec();
            let (h, wd) = (shape[1], shape[2]);
            let count = opts.n_samples.min(h * wd);
            if count < opts.n_samples && !warned {
                log::warn!("n_samples {} exceeds the {} locations of layer {layer}; clipped", opts.n_samples, h * wd);
                warned = true;
            }
            let locations: Vec<_> = sample(&mut rng, h * wd, count).into_iter().map(|i| (layer, i / wd, i % wd)).collect();
            for code in model.project_features(&stack, cgb, Role::Key, &locations)? {
                let norm = code.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt().max(1e-12);
                let record = std::iter::once(label.to_string()).chain(code.iter().map(|v| format!("{}", f64::from(*v) / norm)));
                w.write_record(record).map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| DerainError::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
