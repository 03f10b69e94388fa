//! TOML training configuration with dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DerainError, Result};
use crate::losses::{AdversarialKind, ContrastiveConfig, FrequencyScale, LossWeights, NegativesMode};
use crate::networks::ArchConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveSection {
    pub tau: f64,
    /// Spatial locations sampled per tap layer; each query sees the other
    /// `n_locations − 1` as internal negatives.
    pub n_locations: usize,
    pub n_external: usize,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        ContrastiveSection { tau: 0.07, n_locations: 256, n_external: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs_total: usize,
    pub epochs_const_lr: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    pub image_pool_size: usize,
    pub checkpoint_every: usize,
    pub adversarial: AdversarialKind,
    pub freq_scale: FrequencyScale,
    pub hflip: bool,
    pub deterministic: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs_total: 600,
            epochs_const_lr: 300,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            crop: 256,
            seed: 0,
            image_pool_size: 50,
            checkpoint_every: 50,
            adversarial: AdversarialKind::Log,
            freq_scale: FrequencyScale::Sum,
            hflip: false,
            deterministic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub use_cont: bool,
    pub use_colorcyc: bool,
    pub use_freq: bool,
    pub use_backward_cycle: bool,
    pub negatives_mode: NegativesMode,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { use_cont: true, use_colorcyc: true, use_freq: true, use_backward_cycle: true, negatives_mode: NegativesMode::Both }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory holding `trainR/` and `trainN/`.
    pub root: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub contrastive: ContrastiveSection,
    pub training: TrainingSection,
    pub toggles: Toggles,
    pub data: DataSection,
}

/// Documentation for each configuration key, in schema order.
const KEY_DOCS: &[(&str, &str)] = &[
    ("arch.base_channels", "generator width and discriminator ndf"),
    ("arch.n_res_blocks", "residual blocks in each generator"),
    ("arch.tap_layers", "encoder layers feeding the projection heads (0 stem, 1-2 downsampling, 3+i residual block i)"),
    ("arch.norm", "normalization layer (instance)"),
    ("arch.padding", "generator padding (reflection)"),
    ("arch.proj_dim", "projection code length"),
    ("arch.proj_hidden", "projection hidden width"),
    ("weights.lambda1", "contrastive weight"),
    ("weights.lambda2", "color cycle weight"),
    ("weights.lambda3", "adversarial weight"),
    ("weights.lambda4", "frequency weight"),
    ("contrastive.tau", "similarity temperature"),
    ("contrastive.n_locations", "locations sampled per tap layer; internal negatives = n_locations - 1"),
    ("contrastive.n_external", "external negatives per query"),
    ("training.epochs_total", "training epochs"),
    ("training.epochs_const_lr", "epochs before the linear decay starts"),
    ("training.lr", "initial learning rate"),
    ("training.adam_beta1", "Adam first-moment decay"),
    ("training.adam_beta2", "Adam second-moment decay"),
    ("training.batch_size", "samples per step"),
    ("training.crop", "square training crop side"),
    ("training.seed", "seed for initialization, sampling and pools"),
    ("training.image_pool_size", "history pool capacity (0 disables)"),
    ("training.checkpoint_every", "epochs between checkpoints"),
    ("training.adversarial", "adversarial form: log or least_squares"),
    ("training.freq_scale", "frequency reduction: sum or per_pixel"),
    ("training.hflip", "random horizontal flips"),
    ("training.deterministic", "log wall_ms as 0 so metric logs are byte-reproducible"),
    ("toggles.use_cont", "contrastive term"),
    ("toggles.use_colorcyc", "color cycle term"),
    ("toggles.use_freq", "frequency term"),
    ("toggles.use_backward_cycle", "clean-to-rainy-to-clean cycle"),
    ("toggles.negatives_mode", "internal_only, external_only or both"),
    ("data.root", "dataset root with trainR/ and trainN/"),
];

/// One documented key with its default rendered as TOML.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyDoc {
    pub key: String,
    pub default: String,
    pub doc: String,
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => out.push((prefix.to_string(), v.clone())),
    }
}

fn schema_value(cfg: &TrainConfig) -> toml::Value {
    toml::Value::try_from(cfg).expect("config serializes")
}

impl TrainConfig {
    /// Every leaf key of the serialized schema with its value.
    pub fn flat_values(&self) -> Vec<(String, toml::Value)> {
        let mut out = Vec::new();
        flatten("", &schema_value(self), &mut out);
        out
    }

    /// Keys with defaults and documentation, in documentation order.
    pub fn documented_keys() -> Vec<KeyDoc> {
        let defaults = TrainConfig::default().flat_values();
        KEY_DOCS
            .iter()
            .map(|(key, doc)| KeyDoc {
                key: key.to_string(),
                default: defaults
                    .iter()
                    .find(|(k, _)| k == key)
                    .map(|(_, v)| v.to_string())
                    .unwrap_or_else(|| "<missing>".into()),
                doc: doc.to_string(),
            })
            .collect()
    }

    /// Text listing every key, its default and its meaning.
    pub fn help_text() -> String {
        let mut s = String::from("Configuration keys (override with --set key=value):\n");
        for k in Self::documented_keys() {
            s.push_str(&format!("  {:<28} default {:<14} {}\n", k.key, k.default, k.doc));
        }
        s
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| DerainError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| DerainError::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| DerainError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| DerainError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.contrastive.tau,
            n_internal: self.contrastive.n_locations.saturating_sub(1),
            n_external: self.contrastive.n_external,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        self.contrastive_config().validate()?;
        let t = &self.training;
        let fail = |m: String| Err(DerainError::Config(m));
        if t.epochs_const_lr > t.epochs_total {
            return fail(format!("epochs_const_lr {} exceeds epochs_total {}", t.epochs_const_lr, t.epochs_total));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return fail(format!("lr = {} must be positive", t.lr));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if t.batch_size == 0 || t.checkpoint_every == 0 {
            return fail("batch_size and checkpoint_every must be at least 1".into());
        }
        if t.crop < super::super::networks::DISCRIMINATOR_MIN_INPUT || !t.crop.is_multiple_of(4) {
            return fail(format!(
                "crop {} must be a multiple of 4 and at least {}",
                t.crop,
                super::super::networks::DISCRIMINATOR_MIN_INPUT
            ));
        }
        if self.contrastive.n_locations < 2 {
            return fail("n_locations must be at least 2".into());
        }
        if self.toggles.use_cont && self.toggles.negatives_mode == NegativesMode::ExternalOnly && !self.toggles.use_backward_cycle {
            return fail("external_only negatives come from the backward stream; enable use_backward_cycle".into());
        }
        if self.toggles.use_cont {
            for &layer in &self.arch.tap_layers {
                let side = t.crop / self.arch.layer_stride(layer);
                let extent = side * side;
                let external = self.external_count();
                if self.contrastive.n_locations > extent || external > extent {
                    return fail(format!(
                        "tap layer {layer} has {extent} locations at crop {}, fewer than n_locations {} or external count {external}",
                        t.crop, self.contrastive.n_locations
                    ));
                }
            }
        }
        Ok(())
    }

    /// External negatives per query under the configured mode.
    pub fn external_count(&self) -> usize {
        if !self.toggles.use_backward_cycle {
            return 0;
        }
        match self.toggles.negatives_mode {
            NegativesMode::InternalOnly => 0,
            NegativesMode::Both => self.contrastive.n_external,
            NegativesMode::ExternalOnly => self.contrastive.n_external.min(self.contrastive.n_locations - 1),
        }
    }

    /// Internal negatives per query under the configured mode.
    pub fn internal_count(&self) -> usize {
        match self.toggles.negatives_mode {
            NegativesMode::ExternalOnly if self.toggles.use_backward_cycle => 0,
            _ => self.contrastive.n_locations - 1,
        }
    }
}

/// Sets `key=value` in `table`; the key must exist in the schema. The value
/// is parsed as TOML and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| DerainError::Config(format!("override `{assignment}` must look like key=value")))?;
    let key = key.trim();
    let known = TrainConfig::default().flat_values();
    if !known.iter().any(|(k, _)| k == key) {
        return Err(DerainError::Config(format!("unknown configuration key `{key}`")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("nonempty key");
    let mut cursor = table;
    for part in parts {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| DerainError::Config(format!("`{part}` is not a section")))?;
    }
    cursor.insert(leaf.to_string(), value);
    Ok(())
}
