//! Directory evaluation, cross-domain sweeps and embedding export.

mod embeddings;
mod metrics;
mod report;

pub use embeddings::{export_embeddings, EmbeddingOptions};
pub use metrics::{luma, psnr, psnr_from_mse, psnr_luma, ssim, ssim_planes, LUMA, PSNR_CAP_DB, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use report::{cross_domain_sweep, evaluate_dir, Aggregate, EvalReport, EvalRow, SweepEntry, SweepTable};

use std::path::Path;

use crate::error::Result;
use crate::image::ImageTensor;
use crate::networks::{translate_image, Direction, ModelState};

/// Anything that maps a rainy image to a derained one.
pub trait Restorer {
    fn restore(&self, img: &ImageTensor) -> Result<ImageTensor>;
    /// Identifier echoed in reports.
    fn id(&self) -> String;
}

/// Returns its input; a baseline and a pipeline oracle.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn restore(&self, img: &ImageTensor) -> Result<ImageTensor> {
        Ok(img.clone())
    }

    fn id(&self) -> String {
        "identity".into()
    }
}

/// Derains with the rain-to-clean generator of a model.
#[derive(Clone, Debug)]
pub struct GeneratorRestorer {
    pub model: ModelState<f32>,
    pub id: String,
}

impl GeneratorRestorer {
    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let (model, manifest) = crate::training::load_model::<f32>(dir, None)?;
        Ok(GeneratorRestorer { model, id: format!("{}@{}", dir.display(), manifest.iteration) })
    }
}

impl Restorer for GeneratorRestorer {
    fn restore(&self, img: &ImageTensor) -> Result<ImageTensor> {
        translate_image(&self.model, Direction::RainToClean, img)
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}
