//! Reference-based fidelity metrics on images mapped from [-1, 1] to [0, 1].

use crate::error::{DerainError, Result};
use crate::image::ImageTensor;

/// Reported instead of infinity when two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn unit(v: f32) -> f64 {
    (f64::from(v) + 1.0) / 2.0
}

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DerainError::Dimension(format!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio from a mean squared error on unit range.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// PSNR over all RGB values.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (unit(x) - unit(y)).powi(2)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

/// Luma plane on unit range, row-major.
pub fn luma(img: &ImageTensor) -> Result<Vec<f64>> {
    let [c, h, w] = img.shape();
    if c != 3 {
        return Err(DerainError::Dimension(format!("luma needs 3 channels, got {c}")));
    }
    Ok((0..h * w)
        .map(|i| (0..3).map(|ch| LUMA[ch] * unit(img.data()[ch * h * w + i])).sum())
        .collect())
}

/// PSNR of the luma planes.
pub fn psnr_luma(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (ya, yb) = (luma(a)?, luma(b)?);
    let mse = ya.iter().zip(&yb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ya.len() as f64;
    Ok(psnr_from_mse(mse))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian filter keeping only fully covered windows.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes (11×11 Gaussian window, unit dynamic range).
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let [_, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DerainError::Dimension(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let (x, y) = (luma(a)?, luma(b)?);
    ssim_planes(&x, &y, h, w)
}

/// SSIM of two single-channel planes on unit range.
pub fn ssim_planes(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if x.len() != h * w || y.len() != h * w {
        return Err(DerainError::Dimension("plane length does not match its extent".into()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DerainError::Dimension(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let k = gaussian_window();
    let product = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(x, h, w, &k);
    let mu_y = filter_valid(y, h, w, &k);
    let xx = filter_valid(&product(x, x), h, w, &k);
    let yy = filter_valid(&product(y, y), h, w, &k);
    let xy = filter_valid(&product(x, y), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}
