use super::config::TrainConfig;
use crate::error::{DerainError, Result};

/// Constant `lr` for the first `epochs_const_lr` epochs, then
/// `lr · (1 − (epoch − const + 1) / (total − const))`, clamped at 0.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let t = &cfg.training;
    if epoch >= t.epochs_total {
        return Err(DerainError::Domain(format!("epoch {epoch} outside 0..{}", t.epochs_total)));
    }
    if epoch < t.epochs_const_lr {
        return Ok(t.lr);
    }
    let decay = (t.epochs_total - t.epochs_const_lr) as f64;
    let progress = (epoch - t.epochs_const_lr + 1) as f64 / decay;
    Ok((t.lr * (1.0 - progress)).max(0.0))
}
