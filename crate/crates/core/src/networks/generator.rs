use derain_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;

use super::arch::ArchConfig;
use super::params::{gaussian_tensor, Binding, ParamSet};
use crate::error::{DerainError, Result};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// One convolution of a layout; `transposed` weights are stored `Cin×Cout×k×k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub transposed: bool,
}

impl ConvSpec {
    fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, transposed: bool) -> Self {
        ConvSpec { name: name.into(), cin, cout, k, transposed }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        if self.transposed {
            [self.cin, self.cout, self.k, self.k]
        } else {
            [self.cout, self.cin, self.k, self.k]
        }
    }
}

/// Parameters for every conv in `layout`: weight at `2i`, bias at `2i + 1`.
pub(crate) fn init_convs<T: Real, R: Rng + ?Sized>(group: u16, layout: &[ConvSpec], rng: &mut R) -> ParamSet<T> {
    let mut set = ParamSet::new(group);
    for spec in layout {
        set.push(format!("{}.weight", spec.name), gaussian_tensor(&spec.weight_shape(), rng));
        set.push(format!("{}.bias", spec.name), Tensor::zeros(&[spec.cout]));
    }
    set
}

/// Result of a generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorPass {
    /// `None` when the pass stopped after the encoder taps.
    pub output: Option<Var>,
    /// Activations at the requested taps, in tap order.
    pub taps: Vec<Var>,
}

/// ResNet translator: reflect-padded 7×7 stem, two stride-2 downsampling
/// blocks, a residual trunk, two upsampling blocks and a 7×7 tanh head.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    arch: ArchConfig,
}

impl Generator {
    pub fn new(arch: &ArchConfig) -> Self {
        Generator { arch: arch.clone() }
    }

    pub fn layout(&self) -> Vec<ConvSpec> {
        let b = self.arch.base_channels;
        let mut specs = vec![
            ConvSpec::new("stem", 3, b, 7, false),
            ConvSpec::new("down1", b, 2 * b, 3, false),
            ConvSpec::new("down2", 2 * b, 4 * b, 3, false),
        ];
        for i in 0..self.arch.n_res_blocks {
            specs.push(ConvSpec::new(format!("res{i}.conv1"), 4 * b, 4 * b, 3, false));
            specs.push(ConvSpec::new(format!("res{i}.conv2"), 4 * b, 4 * b, 3, false));
        }
        specs.push(ConvSpec::new("up1", 4 * b, 2 * b, 3, true));
        specs.push(ConvSpec::new("up2", 2 * b, b, 3, true));
        specs.push(ConvSpec::new("head", b, 3, 7, false));
        specs
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, group: u16, rng: &mut R) -> ParamSet<T> {
        init_convs(group, &self.layout(), rng)
    }

    /// Inputs must be 3-channel with sides divisible by 4 and at least 8.
    pub fn check_input(shape: &[usize]) -> Result<()> {
        match shape {
            &[3, h, w] if h % 4 == 0 && w % 4 == 0 && h >= 8 && w >= 8 => Ok(()),
            &[3, h, w] => Err(DerainError::Dimension(format!(
                "generator input {h}×{w} must have sides that are a multiple of 4 and at least 8"
            ))),
            s => Err(DerainError::Dimension(format!("generator input must be 3×H×W, got {s:?}"))),
        }
    }

    /// Full translation; also returns activations at `taps`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, binding: Binding, x: Var, taps: &[usize]) -> Result<GeneratorPass> {
        self.run(g, params, binding, x, taps, false)
    }

    /// Encoder only, stopping after the deepest tap.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, binding: Binding, x: Var, taps: &[usize]) -> Result<Vec<Var>> {
        Ok(self.run(g, params, binding, x, taps, true)?.taps)
    }

    fn run<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        binding: Binding,
        x: Var,
        taps: &[usize],
        encode_only: bool,
    ) -> Result<GeneratorPass> {
        Self::check_input(g.shape(x))?;
        if !taps.is_empty() {
            self.arch.validate_taps(taps)?;
        }
        let last_tap = taps.last().copied();
        let mut collected = Vec::with_capacity(taps.len());
        let mut layer = Layers { g, params, binding };

        let tap = |id: usize, v: Var, out: &mut Vec<Var>| -> bool {
            if taps.contains(&id) {
                out.push(v);
            }
            encode_only && Some(id) == last_tap
        };

        let padded = layer.g.reflect_pad(x, 3)?;
        let mut h = layer.conv_norm_relu(0, padded, 1, 0)?;
        if tap(0, h, &mut collected) {
            return Ok(GeneratorPass { output: None, taps: collected });
        }
        for i in [1, 2] {
            h = layer.conv_norm_relu(i, h, 2, 1)?;
            if tap(i, h, &mut collected) {
                return Ok(GeneratorPass { output: None, taps: collected });
            }
        }
        for r in 0..self.arch.n_res_blocks {
            let first = 3 + 2 * r;
            let p = layer.g.reflect_pad(h, 1)?;
            let y = layer.conv_norm_relu(first, p, 1, 0)?;
            let p = layer.g.reflect_pad(y, 1)?;
            let y = layer.conv(first + 1, p, 1, 0)?;
            let y = layer.g.instance_norm(y, NORM_EPS)?;
            h = layer.g.add(h, y)?;
            if tap(3 + r, h, &mut collected) {
                return Ok(GeneratorPass { output: None, taps: collected });
            }
        }
        if encode_only {
            return Ok(GeneratorPass { output: None, taps: collected });
        }
        let up = 3 + 2 * self.arch.n_res_blocks;
        for i in [up, up + 1] {
            let (w, b) = (layer.weight(i), layer.bias(i));
            let y = layer.g.conv_transpose2d(h, w, Some(b), 2, 1, 1)?;
            let y = layer.g.instance_norm(y, NORM_EPS)?;
            h = layer.g.relu(y);
        }
        let p = layer.g.reflect_pad(h, 3)?;
        let y = layer.conv(up + 2, p, 1, 0)?;
        let out = layer.g.tanh(y);
        Ok(GeneratorPass { output: Some(out), taps: collected })
    }
}

/// Binds conv `i` of a layout on the fly.
pub(crate) struct Layers<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub params: &'a ParamSet<T>,
    pub binding: Binding,
}

impl<T: Real> Layers<'_, T> {
    pub fn weight(&mut self, i: usize) -> Var {
        self.params.bind(self.g, 2 * i, self.binding)
    }

    pub fn bias(&mut self, i: usize) -> Var {
        self.params.bind(self.g, 2 * i + 1, self.binding)
    }

    pub fn conv(&mut self, i: usize, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let (w, b) = (self.weight(i), self.bias(i));
        Ok(self.g.conv2d(x, w, Some(b), stride, pad)?)
    }

    pub fn conv_norm_relu(&mut self, i: usize, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv(i, x, stride, pad)?;
        let y = self.g.instance_norm(y, NORM_EPS)?;
        Ok(self.g.relu(y))
    }
}
