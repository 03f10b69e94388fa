use derain_tensor::{lit, Graph, ParamId, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

/// How a parameter enters a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Gradient is collected under the set's group id.
    Trainable,
    /// Enters as a constant; no gradient.
    Frozen,
}

/// Ordered, named tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    group: u16,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(group: u16) -> Self {
        ParamSet { group, names: Vec::new(), tensors: Vec::new() }
    }

    pub fn group(&self) -> u16 {
        self.group
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn id(&self, index: usize) -> ParamId {
        ParamId { group: self.group, index: index as u32 }
    }

    pub fn bind(&self, g: &mut Graph<T>, index: usize, binding: Binding) -> Var {
        match binding {
            Binding::Trainable => g.param(self.id(index), &self.tensors[index]),
            Binding::Frozen => g.constant(self.tensors[index].clone()),
        }
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { group: self.group, names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Gradients from the last backward sweep, one slot per tensor.
    pub fn grads(&self, g: &Graph<T>) -> Vec<Option<Tensor<T>>> {
        (0..self.len()).map(|i| g.param_grad(self.id(i)).cloned()).collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(T::to_le_bytes_vec(t.data()));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Weights from `N(0, INIT_STD²)`, drawn in f64 so every precision starts
/// from the same values.
pub fn gaussian_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| lit(normal.sample(rng)))
}
