//! Generators with encoder taps, PatchGAN discriminators and projection heads.

mod arch;
mod discriminator;
mod generator;
mod heads;
mod params;

pub use arch::{ArchConfig, NormKind, PaddingKind};
pub use discriminator::{Discriminator, MIN_INPUT as DISCRIMINATOR_MIN_INPUT};
pub use generator::{ConvSpec, Generator, GeneratorPass};
pub use heads::{Cgb, ProjectionHeads, Role};
pub use params::{gaussian_tensor, Binding, ParamSet, INIT_STD};

use derain_tensor::{Graph, Real, Tensor};
use rand::Rng;

use crate::error::{DerainError, Result};
use crate::image::ImageTensor;

/// Parameter-group ids on the tape.
pub mod group {
    pub const G_R2N: u16 = 0;
    pub const G_N2R: u16 = 1;
    pub const D_R: u16 = 2;
    pub const D_N: u16 = 3;
    pub const HEADS: u16 = 4;
}

/// Translation direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Rainy to clean (`G_R2N`), the deraining direction.
    RainToClean,
    /// Clean to rainy (`G_N2R`).
    CleanToRain,
}

/// Activations at the configured tap layers for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T> {
    pub layers: Vec<(usize, Tensor<T>)>,
}

/// Every trainable tensor of the method.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub arch: ArchConfig,
    pub g_r2n: ParamSet<T>,
    pub g_n2r: ParamSet<T>,
    pub d_r: ParamSet<T>,
    pub d_n: ParamSet<T>,
    pub heads: ParamSet<T>,
}

/// Draws every network in a fixed order: `G_R2N`, `G_N2R`, `D_R`, `D_N`, heads.
pub fn init_params<T: Real, R: Rng + ?Sized>(rng: &mut R, arch: &ArchConfig) -> Result<ModelState<T>> {
    arch.validate()?;
    let gen = Generator::new(arch);
    let disc = Discriminator::new(arch);
    Ok(ModelState {
        arch: arch.clone(),
        g_r2n: gen.init(group::G_R2N, rng),
        g_n2r: gen.init(group::G_N2R, rng),
        d_r: disc.init(group::D_R, rng),
        d_n: disc.init(group::D_N, rng),
        heads: ProjectionHeads::new(arch).init(group::HEADS, rng),
    })
}

impl<T: Real> ModelState<T> {
    pub fn generator(&self) -> Generator {
        Generator::new(&self.arch)
    }

    pub fn discriminator(&self) -> Discriminator {
        Discriminator::new(&self.arch)
    }

    pub fn projection_heads(&self) -> ProjectionHeads {
        ProjectionHeads::new(&self.arch)
    }

    pub fn generator_params(&self, dir: Direction) -> &ParamSet<T> {
        match dir {
            Direction::RainToClean => &self.g_r2n,
            Direction::CleanToRain => &self.g_n2r,
        }
    }

    /// All sets in the fixed order used by checkpoints and optimizers.
    pub fn sets(&self) -> [&ParamSet<T>; 5] {
        [&self.g_r2n, &self.g_n2r, &self.d_r, &self.d_n, &self.heads]
    }

    pub fn sets_mut(&mut self) -> [&mut ParamSet<T>; 5] {
        [&mut self.g_r2n, &mut self.g_n2r, &mut self.d_r, &mut self.d_n, &mut self.heads]
    }

    pub fn is_finite(&self) -> bool {
        self.sets().iter().all(|s| s.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            arch: self.arch.clone(),
            g_r2n: self.g_r2n.cast(),
            g_n2r: self.g_n2r.cast(),
            d_r: self.d_r.cast(),
            d_n: self.d_n.cast(),
            heads: self.heads.cast(),
        }
    }

    /// Generator output for one image.
    pub fn generator_forward(&self, dir: Direction, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let pass = self.generator().forward(&mut g, self.generator_params(dir), Binding::Frozen, x, &[])?;
        Ok(g.value(pass.output.expect("full pass")).clone())
    }

    /// Encoder activations at `taps`.
    pub fn generator_encode(&self, dir: Direction, img: &Tensor<T>, taps: &[usize]) -> Result<FeatureStack<T>> {
        self.arch.validate_taps(taps)?;
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let vars = self.generator().encode(&mut g, self.generator_params(dir), Binding::Frozen, x, taps)?;
        Ok(FeatureStack { layers: taps.iter().zip(vars).map(|(&l, v)| (l, g.value(v).clone())).collect() })
    }

    /// Logit map of `D_R` (`rainy_domain`) or `D_N`.
    pub fn discriminator_forward(&self, rainy_domain: bool, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let params = if rainy_domain { &self.d_r } else { &self.d_n };
        let out = self.discriminator().forward(&mut g, params, Binding::Frozen, x)?;
        Ok(g.value(out).clone())
    }

    /// Raw codes for `(layer, y, x)` locations of `stack`, using the head of
    /// `(cgb, role)` at that layer.
    pub fn project_features(&self, stack: &FeatureStack<T>, cgb: Cgb, role: Role, locations: &[(usize, usize, usize)]) -> Result<Vec<Vec<T>>> {
        let heads = self.projection_heads();
        let mut codes = Vec::with_capacity(locations.len());
        for &(layer, y, x) in locations {
            let tap = self
                .arch
                .tap_layers
                .iter()
                .position(|&l| l == layer)
                .ok_or_else(|| DerainError::Index(format!("layer {layer} is not a tap layer")))?;
            let (_, feat) = stack
                .layers
                .iter()
                .find(|(l, _)| *l == layer)
                .ok_or_else(|| DerainError::Index(format!("feature stack has no layer {layer}")))?;
            let (h, w) = (feat.shape()[1], feat.shape()[2]);
            if y >= h || x >= w {
                return Err(DerainError::Index(format!("location ({y}, {x}) outside {h}×{w} map of layer {layer}")));
            }
            let mut g = Graph::new();
            let f = g.constant(feat.clone());
            let code = heads.project(&mut g, &self.heads, Binding::Frozen, tap, cgb, role, f, &[y * w + x])?;
            codes.push(g.value(code).data().to_vec());
        }
        Ok(codes)
    }
}

/// Derains or rains an image of any size: reflect-pads to a multiple of 4
/// (and at least 8), translates, and crops back.
pub fn translate_image(model: &ModelState<f32>, dir: Direction, img: &ImageTensor) -> Result<ImageTensor> {
    let [c, h, w] = img.shape();
    if c != 3 {
        return Err(DerainError::Dimension(format!("expected 3 channels, got {c}")));
    }
    let target = |s: usize| s.div_ceil(4).max(2) * 4;
    let (ph, pw) = (target(h), target(w));
    let padded = reflect_pad_to(img, ph, pw)?;
    let out = model.generator_forward(dir, padded.tensor())?;
    ImageTensor::from_tensor(out)?.crop(0, 0, h, w)
}

/// Extends the bottom and right borders by reflection (edge excluded).
fn reflect_pad_to(img: &ImageTensor, ph: usize, pw: usize) -> Result<ImageTensor> {
    let [c, h, w] = img.shape();
    if ph == h && pw == w {
        return Ok(img.clone());
    }
    if ph - h >= h.max(2) || pw - w >= w.max(2) {
        return Err(DerainError::Dimension(format!("image {h}×{w} too small to reflect-pad to {ph}×{pw}")));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                data.push(img.at(ch, reflect(y, h), reflect(x, w)));
            }
        }
    }
    ImageTensor::new(c, ph, pw, data)
}
