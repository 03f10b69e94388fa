//! Central finite differences for checking tape gradients.

use crate::tensor::Tensor;

/// Numerical gradient of `f` at `x`: `(f(x+εe_i) − f(x−εe_i)) / 2ε`.
pub fn numerical_grad(x: &Tensor<f64>, eps: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    out
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
