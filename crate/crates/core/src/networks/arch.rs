use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DerainError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingKind {
    Reflection,
}

/// Shape hyperparameters shared by both generators, both discriminators and
/// the projection heads.
///
/// Encoder layer ids: `0` stem, `1` and `2` the downsampling blocks,
/// `3 + i` the output of residual block `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub tap_layers: Vec<usize>,
    pub norm: NormKind,
    pub padding: PaddingKind,
    pub proj_dim: usize,
    pub proj_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_channels: 64,
            n_res_blocks: 9,
            tap_layers: Self::default_taps(9),
            norm: NormKind::Instance,
            padding: PaddingKind::Reflection,
            proj_dim: 256,
            proj_hidden: 256,
        }
    }
}

impl ArchConfig {
    /// Stem, both downsampling blocks and the middle residual block.
    pub fn default_taps(n_res_blocks: usize) -> Vec<usize> {
        vec![0, 1, 2, 3 + n_res_blocks / 2]
    }

    /// Number of encoder layers that can be tapped.
    pub fn encoder_layers(&self) -> usize {
        3 + self.n_res_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.proj_dim == 0 || self.proj_hidden == 0 {
            return Err(DerainError::Config("channel and projection widths must be positive".into()));
        }
        if self.n_res_blocks == 0 {
            return Err(DerainError::Config("n_res_blocks must be at least 1".into()));
        }
        self.validate_taps(&self.tap_layers)
    }

    pub fn validate_taps(&self, taps: &[usize]) -> Result<()> {
        if taps.is_empty() {
            return Err(DerainError::Config("tap_layers must be nonempty".into()));
        }
        if taps.windows(2).any(|p| p[0] >= p[1]) {
            return Err(DerainError::Config(format!("tap_layers must be strictly increasing, got {taps:?}")));
        }
        if let Some(&bad) = taps.iter().find(|&&t| t >= self.encoder_layers()) {
            return Err(DerainError::Config(format!(
                "tap layer {bad} is out of range; valid ids are 0..={}",
                self.encoder_layers() - 1
            )));
        }
        Ok(())
    }

    /// Channel count of encoder layer `layer`.
    pub fn layer_channels(&self, layer: usize) -> usize {
        match layer {
            0 => self.base_channels,
            1 => 2 * self.base_channels,
            _ => 4 * self.base_channels,
        }
    }

    /// Downsampling factor of encoder layer `layer`.
    pub fn layer_stride(&self, layer: usize) -> usize {
        match layer {
            0 => 1,
            1 => 2,
            _ => 4,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("arch serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
