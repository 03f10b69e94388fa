//! RGB images as `3×H×W` tensors in `[-1, 1]`, plus file I/O and augmentation.

use std::path::Path;

use derain_tensor::Tensor;
use image::{ColorType, ImageReader, RgbImage};
use rand::Rng;

use crate::error::{DerainError, Result};

/// A `C×H×W` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_tensor(Tensor::new(&[channels, height, width], data)?)
    }

    pub fn from_tensor(tensor: Tensor<f32>) -> Result<Self> {
        match tensor.shape() {
            &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok(ImageTensor { tensor }),
            s => Err(DerainError::Dimension(format!("image must be a nonempty C×H×W tensor, got {s:?}"))),
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        ImageTensor { tensor: Tensor::full(&[channels, height, width], value) }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.tensor.data_mut()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Pixel `p` maps to `2·p/255 − 1`.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = 2.0 * (px[c] as f32 / 255.0) - 1.0;
            }
        }
        ImageTensor { tensor: Tensor::new(&[3, h, w], data).expect("rgb shape") }
    }

    /// Inverse of [`ImageTensor::from_rgb8`] with rounding and clamping.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels() != 3 {
            return Err(DerainError::Dimension(format!("expected 3 channels, got {}", self.channels())));
        }
        let (h, w) = (self.height(), self.width());
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = quantize(self.at(c, y as usize, x as usize));
            }
            image::Rgb(px)
        }))
    }

    /// `size_h×size_w` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size_h: usize, size_w: usize) -> Result<Self> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        if y + size_h > h || x + size_w > w || size_h == 0 || size_w == 0 {
            return Err(DerainError::Dimension(format!(
                "crop {size_h}×{size_w} at ({y}, {x}) does not fit a {h}×{w} image"
            )));
        }
        let mut data = Vec::with_capacity(c * size_h * size_w);
        for ch in 0..c {
            for yy in y..y + size_h {
                let row = (ch * h + yy) * w;
                data.extend_from_slice(&self.data()[row + x..row + x + size_w]);
            }
        }
        ImageTensor::new(c, size_h, size_w, data)
    }

    pub fn hflip(&self) -> Self {
        let w = self.width();
        let mut out = self.clone();
        for (dst, src) in out.data_mut().chunks_exact_mut(w).zip(self.data().chunks_exact(w)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let reader = ImageReader::open(path)
        .map_err(|e| DerainError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| DerainError::io(path, e))?;
    let decoded = reader
        .decode()
        .map_err(|e| DerainError::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    if decoded.color() != ColorType::Rgb8 {
        return Err(DerainError::Decode {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit RGB, found {:?}", decoded.color()),
        });
    }
    Ok(ImageTensor::from_rgb8(&decoded.into_rgb8()))
}

/// Writes 8-bit RGB; the format follows the file extension.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DerainError::io(parent, e))?;
    }
    img.to_rgb8()?.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => DerainError::io(path, io),
        other => DerainError::Decode { path: path.to_path_buf(), reason: other.to_string() },
    })
}

/// Uniform `size×size` window.
pub fn random_crop<R: Rng + ?Sized>(img: &ImageTensor, size: usize, rng: &mut R) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    if size == 0 || size > h.min(w) {
        return Err(DerainError::Dimension(format!("crop size {size} exceeds image {h}×{w}")));
    }
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    img.crop(y, x, size, size)
}

/// Horizontal flip with probability 0.5; draws nothing when disabled.
pub fn augment<R: Rng + ?Sized>(img: ImageTensor, rng: &mut R, enable_hflip: bool) -> ImageTensor {
    if enable_hflip && rng.random_bool(0.5) {
        img.hflip()
    } else {
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_inverts_range_map() {
        for p in 0..=255u8 {
            let v = 2.0 * (p as f32 / 255.0) - 1.0;
            assert_eq!(quantize(v), p);
        }
    }

    #[test]
    fn crop_rejects_overflow() {
        let img = ImageTensor::filled(3, 4, 5, 0.0);
        assert!(img.crop(1, 1, 4, 4).is_err());
        assert_eq!(img.crop(0, 1, 4, 4).unwrap().shape(), [3, 4, 4]);
    }
}
