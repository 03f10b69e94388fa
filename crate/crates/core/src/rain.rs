//! Synthetic additive rain `rainy = clean + streaks` and procedural clean scenes
//! for self-contained desk-scale experiments.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DerainError, Result};
use crate::image::{save_image, ImageTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainSynthesisParams {
    pub streak_count_range: (u32, u32),
    /// Segment length in pixels.
    pub streak_length_range: (u32, u32),
    /// Degrees from vertical.
    pub angle_range: (f64, f64),
    /// Peak brightness in `[0, 1]` image units.
    pub intensity_range: (f64, f64),
    /// Gaussian sigma in pixels; `0` disables blurring.
    pub blur_radius: f64,
    pub seed: u64,
}

impl Default for RainSynthesisParams {
    fn default() -> Self {
        RainSynthesisParams {
            streak_count_range: (20, 40),
            streak_length_range: (8, 20),
            angle_range: (-20.0, 20.0),
            intensity_range: (0.3, 0.6),
            blur_radius: 0.0,
            seed: 0,
        }
    }
}

impl RainSynthesisParams {
    pub fn validate(&self) -> Result<()> {
        let ordered = self.streak_count_range.0 <= self.streak_count_range.1
            && self.streak_length_range.0 <= self.streak_length_range.1
            && self.angle_range.0 <= self.angle_range.1
            && self.intensity_range.0 <= self.intensity_range.1;
        if !ordered {
            return Err(DerainError::Config(format!("rain ranges must satisfy lo ≤ hi: {self:?}")));
        }
        let (lo, hi) = self.intensity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
            return Err(DerainError::Config(format!("intensity range {lo}..{hi} must lie in [0, 1]")));
        }
        if !(self.blur_radius >= 0.0 && self.blur_radius.is_finite()) || !self.angle_range.1.is_finite() {
            return Err(DerainError::Config("blur radius and angles must be finite, blur ≥ 0".into()));
        }
        Ok(())
    }

    /// Same parameters with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        RainSynthesisParams { seed, ..self.clone() }
    }
}

/// A rain streak segment between two points given in pixel-center coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Streak {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
    pub intensity: f64,
}

impl Streak {
    /// Euclidean distance from `(y, x)` to the segment.
    pub fn distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (self.y1 - self.y0, self.x1 - self.x0);
        let len2 = dy * dy + dx * dx;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((y - self.y0) * dy + (x - self.x0) * dx) / len2).clamp(0.0, 1.0)
        };
        let (py, px) = (self.y0 + t * dy, self.x0 + t * dx);
        ((y - py).powi(2) + (x - px).powi(2)).sqrt()
    }
}

/// Draws the segment list for one `h×w` image.
pub fn sample_streaks<R: Rng + ?Sized>(params: &RainSynthesisParams, h: usize, w: usize, rng: &mut R) -> Vec<Streak> {
    let count = rng.random_range(params.streak_count_range.0..=params.streak_count_range.1);
    (0..count)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let len = rng.random_range(params.streak_length_range.0..=params.streak_length_range.1) as f64;
            let angle = uniform(rng, params.angle_range) * PI / 180.0;
            let intensity = uniform(rng, params.intensity_range);
            let (hy, hx) = (0.5 * len * angle.cos(), 0.5 * len * angle.sin());
            Streak { y0: cy - hy, x0: cx - hx, y1: cy + hy, x1: cx + hx, intensity }
        })
        .collect()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Single-plane streak layer: each segment adds `2·intensity·max(0, 1 − d)`,
/// with `d` the pixel's distance to the segment; the sum is clamped to `[0, 2]`.
pub fn render_streaks(streaks: &[Streak], h: usize, w: usize) -> Vec<f32> {
    let mut plane = vec![0.0f64; h * w];
    for s in streaks {
        let y_lo = (s.y0.min(s.y1) - 1.0).floor().max(0.0) as usize;
        let y_hi = ((s.y0.max(s.y1) + 1.0).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        let x_lo = (s.x0.min(s.x1) - 1.0).floor().max(0.0) as usize;
        let x_hi = ((s.x0.max(s.x1) + 1.0).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let coverage = 1.0 - s.distance(y as f64, x as f64);
                if coverage > 0.0 {
                    plane[y * w + x] += 2.0 * s.intensity * coverage;
                }
            }
        }
    }
    plane.into_iter().map(|v| v.clamp(0.0, 2.0) as f32).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(plane: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let tap = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-radius..=radius)
                .map(|d| kernel[(d + radius) as usize] * plane[y * w + tap(x as isize + d, w)] as f64)
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = (-radius..=radius)
                .map(|d| kernel[(d + radius) as usize] * tmp[tap(y as isize + d, h) * w + x])
                .sum::<f64>()
                / norm;
            out[y * w + x] = v as f32;
        }
    }
    out
}

/// Returns `(rainy, streak_layer)`. The streak layer is an additive offset in
/// `[0, 2]`, identical across channels; `rainy = clamp(clean + layer, −1, 1)`.
pub fn synthesize_rain(clean: &ImageTensor, params: &RainSynthesisParams) -> Result<(ImageTensor, ImageTensor)> {
    params.validate()?;
    let [c, h, w] = clean.shape();
    if c * h * w == 0 {
        return Err(DerainError::Dimension("cannot add rain to an empty image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let streaks = sample_streaks(params, h, w, &mut rng);
    let plane = gaussian_blur(&render_streaks(&streaks, h, w), h, w, params.blur_radius);
    let layer: Vec<f32> = (0..c).flat_map(|_| plane.iter().copied()).collect();
    let rainy: Vec<f32> = clean.data().iter().zip(&layer).map(|(a, b)| (a + b).clamp(-1.0, 1.0)).collect();
    Ok((ImageTensor::new(c, h, w, rainy)?, ImageTensor::new(c, h, w, layer)?))
}

/// Per-channel mean of every procedural texture.
pub const TEXTURE_MEAN: [f64; 3] = [-0.25, -0.3, -0.35];
/// Standard deviation of every procedural texture, pooled over channels.
pub const TEXTURE_STD: f64 = 0.25;

/// Smooth colored scene of oriented gratings and soft blobs, shifted and
/// scaled to `TEXTURE_MEAN` and `TEXTURE_STD` before clamping to [-1, 0.8].
///
/// A generator whose first layer is instance-normalized is blind to a global
/// gain and per-channel offset of its input, so the photometric statistics are
/// pinned and the pattern alone determines the image.
pub fn procedural_texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> ImageTensor {
    let gratings: Vec<([f64; 3], f64, f64, f64)> = (0..3)
        .map(|_| {
            let color = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
            let freq = rng.random_range(0.5..4.0) * 2.0 * PI / h.max(w) as f64;
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (color, freq, theta, phase)
        })
        .collect();
    let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..4)
        .map(|_| {
            let color = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let r = rng.random_range(0.1..0.3) * h.min(w) as f64;
            (color, cy, cx, r)
        })
        .collect();
    let plane = h * w;
    let mut pattern = vec![0.0f64; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0f64; 3];
            for (color, freq, theta, phase) in &gratings {
                let t = (freq * (y as f64 * theta.cos() + x as f64 * theta.sin()) + phase).sin();
                (0..3).for_each(|c| px[c] += color[c] * t);
            }
            for (color, cy, cx, r) in &blobs {
                let g = (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * r * r)).exp();
                (0..3).for_each(|c| px[c] += color[c] * g);
            }
            for c in 0..3 {
                pattern[c * plane + y * w + x] = px[c];
            }
        }
    }
    for chan in pattern.chunks_mut(plane) {
        let mean = chan.iter().sum::<f64>() / plane as f64;
        chan.iter_mut().for_each(|v| *v -= mean);
    }
    let std = (pattern.iter().map(|v| v * v).sum::<f64>() / pattern.len() as f64).sqrt();
    let gain = if std > 0.0 { TEXTURE_STD / std } else { 0.0 };
    let data = pattern
        .iter()
        .enumerate()
        .map(|(i, v)| (TEXTURE_MEAN[i / plane] + gain * v).clamp(-1.0, 0.8) as f32)
        .collect();
    ImageTensor::new(3, h, w, data).expect("texture shape")
}

/// Record of a synthesized dataset, written as `manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SynthManifest {
    pub seed: u64,
    pub size: usize,
    pub params: RainSynthesisParams,
    pub files: Vec<String>,
    /// Present for the unpaired training layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitCounts>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitCounts {
    pub train_rainy: usize,
    pub train_clean: usize,
    pub test: usize,
}

/// Per-image rain seed; distinct images get independent streak patterns.
pub fn image_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn texture_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn file_name(i: usize) -> String {
    format!("{i:04}.png")
}

fn write_manifest(out: &Path, manifest: &SynthManifest) -> Result<()> {
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).map_err(|e| DerainError::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| DerainError::io(path, e))
}

/// Writes `clean/`, `rainy/`, `streaks/` (layer shifted by −1 to fit 8 bits)
/// and `manifest.json` under `out`.
pub fn write_synthetic_dataset(out: &Path, count: usize, size: usize, params: &RainSynthesisParams) -> Result<SynthManifest> {
    params.validate()?;
    let mut rng = texture_rng(params.seed);
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let clean = procedural_texture(size, size, &mut rng);
        let (rainy, layer) = synthesize_rain(&clean, &params.with_seed(image_seed(params.seed, i)))?;
        let shifted = ImageTensor::new(3, size, size, layer.data().iter().map(|v| v - 1.0).collect())?;
        let name = file_name(i);
        save_image(&clean, &out.join("clean").join(&name))?;
        save_image(&rainy, &out.join("rainy").join(&name))?;
        save_image(&shifted, &out.join("streaks").join(&name))?;
        files.push(name);
    }
    let manifest = SynthManifest { seed: params.seed, size, params: params.clone(), files, split: None };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

/// Unpaired training layout: the first `split.train_rainy` scenes are written
/// rained into `trainR/`, the next `split.train_clean` scenes clean into
/// `trainN/`, and the last `split.test` as `testR/` with `testGT/` references.
pub fn write_training_layout(out: &Path, split: SplitCounts, size: usize, params: &RainSynthesisParams) -> Result<SynthManifest> {
    params.validate()?;
    let mut rng = texture_rng(params.seed);
    let total = split.train_rainy + split.train_clean + split.test;
    let mut files = Vec::with_capacity(total);
    for i in 0..total {
        let clean = procedural_texture(size, size, &mut rng);
        let name = file_name(i);
        let rainy = || -> Result<ImageTensor> {
            Ok(synthesize_rain(&clean, &params.with_seed(image_seed(params.seed, i)))?.0)
        };
        let dest: Vec<(PathBuf, ImageTensor)> = if i < split.train_rainy {
            vec![(out.join("trainR"), rainy()?)]
        } else if i < split.train_rainy + split.train_clean {
            vec![(out.join("trainN"), clean.clone())]
        } else {
            vec![(out.join("testR"), rainy()?), (out.join("testGT"), clean.clone())]
        };
        for (dir, img) in dest {
            save_image(&img, &dir.join(&name))?;
        }
        files.push(name);
    }
    let manifest = SynthManifest { seed: params.seed, size, params: params.clone(), files, split: Some(split) };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}
