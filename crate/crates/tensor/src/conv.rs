//! Patch-matrix kernels behind convolution and transposed convolution.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::real::Real;

/// Upper bound on patch-matrix elements materialized at once.
static PATCH_BUDGET: AtomicUsize = AtomicUsize::new(1 << 22);

/// Sets the patch-matrix budget used by every later convolution. Results do
/// not depend on it beyond floating-point summation order in weight gradients.
pub fn set_patch_budget(elems: usize) {
    PATCH_BUDGET.store(elems.max(1), Ordering::Relaxed);
}

/// Geometry of a 2-D convolution over one `C×H×W` image.
///
/// For a transposed convolution the same struct describes the *adjoint*
/// convolution: `h, w` are the transposed op's output size and `oh, ow` its
/// input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extent of a convolution, `None` when the window never fits.
    pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        if padded < k || stride == 0 {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    }

    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Output-row blocks whose patch matrices stay under a fixed budget.
    pub fn row_chunks(&self) -> impl Iterator<Item = Range<usize>> {
        let per_row = (self.rows() * self.ow).max(1);
        let step = (PATCH_BUDGET.load(Ordering::Relaxed) / per_row).clamp(1, self.oh.max(1));
        let oh = self.oh;
        (0..oh).step_by(step).map(move |a| a..(a + step).min(oh))
    }
}

/// Unfold `src` (`channels×h×w`) into a `(channels·k·k) × (oh·ow)` matrix,
/// zero outside the image.
pub fn im2col<T: Real>(src: &[T], g: &ConvGeom, col: &mut [T]) {
    im2col_rows(src, g, 0..g.oh, col)
}

/// [`im2col`] restricted to output rows `oys`; `col` is
/// `(channels·k·k) × (oys.len()·ow)`.
pub fn im2col_rows<T: Real>(src: &[T], g: &ConvGeom, oys: Range<usize>, col: &mut [T]) {
    let (h, w, k, s, p) = (g.h as isize, g.w as isize, g.k, g.stride as isize, g.pad as isize);
    let npos = oys.len() * g.ow;
    debug_assert_eq!(src.len(), g.channels * g.h * g.w);
    debug_assert_eq!(col.len(), g.rows() * npos);
    for c in 0..g.channels {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * npos..(row + 1) * npos];
                for (r, oy) in oys.clone().enumerate() {
                    let iy = oy as isize * s + ki as isize - p;
                    let out_row = &mut dst[r * g.ow..(r + 1) * g.ow];
                    if iy < 0 || iy >= h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    let base = kj as isize - p;
                    if s == 1 && base >= 0 && base + g.ow as isize <= w {
                        out_row.copy_from_slice(&src_row[base as usize..base as usize + g.ow]);
                        continue;
                    }
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + base;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back onto `dst`.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom, dst: &mut [T]) {
    col2im_rows(col, g, 0..g.oh, dst)
}

/// [`col2im`] for a block of output rows, the adjoint of [`im2col_rows`].
pub fn col2im_rows<T: Real>(col: &[T], g: &ConvGeom, oys: Range<usize>, dst: &mut [T]) {
    let (h, w, k, s, p) = (g.h as isize, g.w as isize, g.k, g.stride as isize, g.pad as isize);
    let npos = oys.len() * g.ow;
    debug_assert_eq!(dst.len(), g.channels * g.h * g.w);
    debug_assert_eq!(col.len(), g.rows() * npos);
    for c in 0..g.channels {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * npos..(row + 1) * npos];
                for (r, oy) in oys.clone().enumerate() {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let in_row = &src[r * g.ow..(r + 1) * g.ow];
                    let dst_row = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    let base = kj as isize - p;
                    if s == 1 && base >= 0 && base + g.ow as isize <= w {
                        for (d, &v) in dst_row[base as usize..base as usize + g.ow].iter_mut().zip(in_row) {
                            *d += v;
                        }
                        continue;
                    }
                    for (ox, &v) in in_row.iter().enumerate() {
                        let ix = ox as isize * s + base;
                        if ix >= 0 && ix < w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Index of the reflected coordinate for reflection padding (edge excluded).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}
