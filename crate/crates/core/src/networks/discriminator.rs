use derain_tensor::{Graph, Real, Var};
use rand::Rng;

use super::arch::ArchConfig;
use super::generator::{init_convs, ConvSpec, Layers, NORM_EPS};
use super::params::{Binding, ParamSet};
use crate::error::{DerainError, Result};

const SLOPE: f64 = 0.2;

/// Smallest side for which the classifier emits at least one logit.
pub const MIN_INPUT: usize = 24;

/// PatchGAN classifier: three stride-2 and two stride-1 4×4 convolutions,
/// emitting a `1×h×w` logit map whose entries each see a 70×70 window.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    ndf: usize,
}

impl Discriminator {
    pub fn new(arch: &ArchConfig) -> Self {
        Discriminator { ndf: arch.base_channels }
    }

    pub fn layout(&self) -> Vec<ConvSpec> {
        let n = self.ndf;
        let chans = [3, n, 2 * n, 4 * n, 8 * n, 1];
        (0..5)
            .map(|i| ConvSpec {
                name: format!("layer{i}"),
                cin: chans[i],
                cout: chans[i + 1],
                k: 4,
                transposed: false,
            })
            .collect()
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, group: u16, rng: &mut R) -> ParamSet<T> {
        init_convs(group, &self.layout(), rng)
    }

    /// Logit-map side for an input side.
    pub fn output_extent(size: usize) -> Option<usize> {
        let mut s = size;
        for stride in [2, 2, 2, 1, 1] {
            s = (s + 2).checked_sub(4)? / stride + 1;
        }
        Some(s)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, binding: Binding, x: Var) -> Result<Var> {
        match g.shape(x) {
            &[3, h, w] if h >= MIN_INPUT && w >= MIN_INPUT => {}
            s => {
                return Err(DerainError::Dimension(format!(
                    "discriminator input must be 3×H×W with H, W ≥ {MIN_INPUT}, got {s:?}"
                )))
            }
        }
        let mut layer = Layers { g, params, binding };
        let mut h = layer.conv(0, x, 2, 1)?;
        h = layer.g.leaky_relu(h, SLOPE);
        for (i, stride) in [(1, 2), (2, 2), (3, 1)] {
            let y = layer.conv(i, h, stride, 1)?;
            let y = layer.g.instance_norm(y, NORM_EPS)?;
            h = layer.g.leaky_relu(y, SLOPE);
        }
        layer.conv(4, h, 1, 1)
    }
}
