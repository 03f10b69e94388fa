use derain_tensor::{lit, Real, Tensor};

use crate::networks::ParamSet;

/// Adam with bias correction; one step counter per tensor so tensors that
/// receive no gradient are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: Vec<u64>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam { beta1, beta2, eps: 1e-8, steps: vec![0; params.len()], m: zeros(), v: zeros() }
    }

    /// Applies one update for every tensor with a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        let (b1, b2): (T, T) = (lit(self.beta1), lit(self.beta2));
        let (one, eps) = (T::one(), lit::<T>(self.eps));
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1: T = lit(1.0 - self.beta1.powi(t));
            let c2: T = lit(1.0 - self.beta2.powi(t));
            let step: T = lit(lr);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.tensor_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = grad.data()[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= step * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
