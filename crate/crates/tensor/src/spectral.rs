//! 2-D discrete Fourier transforms of real planes (unnormalized forward).

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::real::Real;

fn transform_2d<T: Real>(buf: &mut [Complex<T>], h: usize, w: usize, dir: FftDirection) {
    let mut planner = FftPlanner::<T>::new();
    let row_fft = planner.plan_fft(w, dir);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(h, dir);
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Full `h×w` spectrum `F[u,v] = Σ x[y,x]·exp(−2πi(uy/h + vx/w))`.
pub fn dft2<T: Real>(plane: &[T], h: usize, w: usize) -> Vec<Complex<T>> {
    assert_eq!(plane.len(), h * w);
    let mut buf: Vec<Complex<T>> = plane.iter().map(|&v| Complex::new(v, T::zero())).collect();
    transform_2d(&mut buf, h, w, FftDirection::Forward);
    buf
}

/// `Σ_u,v F[u,v]·exp(+2πi(uy/h + vx/w))`, without the `1/(h·w)` factor.
pub fn idft2_unnormalized<T: Real>(spec: &[Complex<T>], h: usize, w: usize) -> Vec<Complex<T>> {
    assert_eq!(spec.len(), h * w);
    let mut buf = spec.to_vec();
    transform_2d(&mut buf, h, w, FftDirection::Inverse);
    buf
}

/// Number of bins kept along the width axis by the one-sided transform.
pub fn one_sided_width(w: usize) -> usize {
    w / 2 + 1
}
