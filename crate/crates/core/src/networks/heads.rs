use derain_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::ArchConfig;
use super::params::{gaussian_tensor, Binding, ParamSet};
use crate::error::{DerainError, Result};

/// Contrastive guidance stream. `Forward` compares the rainy input with its
/// translation, `Backward` the clean input with its translation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cgb {
    Forward,
    Backward,
}

/// Which side of a stream a head embeds: translations are queries, the
/// untranslated inputs supply positives and internal negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Key,
}

impl Cgb {
    fn slot(self) -> usize {
        self as usize
    }
}

impl Role {
    fn slot(self) -> usize {
        self as usize
    }
}

/// Two-layer perceptrons `Linear → ReLU → Linear`, one per
/// (tap layer, stream, role); no weights are shared.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    arch: ArchConfig,
}

impl ProjectionHeads {
    pub fn new(arch: &ArchConfig) -> Self {
        ProjectionHeads { arch: arch.clone() }
    }

    pub fn head_count(&self) -> usize {
        self.arch.tap_layers.len() * 2 * 2
    }

    fn base_index(tap: usize, cgb: Cgb, role: Role) -> usize {
        ((tap * 2 + cgb.slot()) * 2 + role.slot()) * 4
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, group: u16, rng: &mut R) -> ParamSet<T> {
        let (hidden, dim) = (self.arch.proj_hidden, self.arch.proj_dim);
        let mut set = ParamSet::new(group);
        for &layer in &self.arch.tap_layers {
            let c = self.arch.layer_channels(layer);
            for cgb in [Cgb::Forward, Cgb::Backward] {
                for role in [Role::Query, Role::Key] {
                    let stem = format!("{}.{}.layer{layer}", name(cgb), role_name(role));
                    set.push(format!("{stem}.fc1.weight"), gaussian_tensor(&[hidden, c], rng));
                    set.push(format!("{stem}.fc1.bias"), Tensor::zeros(&[hidden]));
                    set.push(format!("{stem}.fc2.weight"), gaussian_tensor(&[dim, hidden], rng));
                    set.push(format!("{stem}.fc2.bias"), Tensor::zeros(&[dim]));
                }
            }
        }
        set
    }

    /// Raw codes (`S×proj_dim`) for flat spatial `locations` of the feature
    /// map at tap position `tap`.
    #[allow(clippy::too_many_arguments)]
    pub fn project<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        binding: Binding,
        tap: usize,
        cgb: Cgb,
        role: Role,
        features: Var,
        locations: &[usize],
    ) -> Result<Var> {
        if tap >= self.arch.tap_layers.len() {
            return Err(DerainError::Index(format!("tap position {tap} out of range")));
        }
        let base = Self::base_index(tap, cgb, role);
        let rows = g.gather_locations(features, locations)?;
        let w1 = params.bind(g, base, binding);
        let b1 = params.bind(g, base + 1, binding);
        let hidden = g.linear(rows, w1, Some(b1))?;
        let hidden = g.relu(hidden);
        let w2 = params.bind(g, base + 2, binding);
        let b2 = params.bind(g, base + 3, binding);
        Ok(g.linear(hidden, w2, Some(b2))?)
    }
}

fn name(cgb: Cgb) -> &'static str {
    match cgb {
        Cgb::Forward => "fwd",
        Cgb::Backward => "bwd",
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Query => "query",
        Role::Key => "key",
    }
}
