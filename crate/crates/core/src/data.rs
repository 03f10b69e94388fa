//! Unpaired sampling from a rainy directory and a clean directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{DerainError, Result};
use crate::image::{augment, load_image, random_crop, ImageTensor};

/// One rainy and one clean crop with no pairing relation.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedBatch {
    pub rainy: ImageTensor,
    pub clean: ImageTensor,
}

/// Sorted PNG/JPEG files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| DerainError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DerainError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Image files of one domain, decoded on first use and cached.
#[derive(Debug)]
pub struct ImageSource {
    files: Vec<PathBuf>,
    cache: HashMap<usize, ImageTensor>,
}

impl ImageSource {
    pub fn open(dir: &Path) -> Result<Self> {
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(DerainError::Config(format!("no PNG/JPEG images in {}", dir.display())));
        }
        Ok(ImageSource { files, cache: HashMap::new() })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn get(&mut self, index: usize) -> Result<&ImageTensor> {
        if !self.cache.contains_key(&index) {
            let img = load_image(&self.files[index])?;
            self.cache.insert(index, img);
        }
        Ok(&self.cache[&index])
    }
}

/// Draws each domain's file independently and uniformly, then crops and
/// augments. Every random draw comes from the caller's stream in a fixed
/// order: rainy index, clean index, rainy crop, clean crop, rainy flip, clean flip.
#[derive(Debug)]
pub struct UnpairedSampler {
    rainy: ImageSource,
    clean: ImageSource,
    crop: usize,
    hflip: bool,
}

impl UnpairedSampler {
    pub fn new(rainy_dir: &Path, clean_dir: &Path, crop: usize, hflip: bool) -> Result<Self> {
        Ok(UnpairedSampler { rainy: ImageSource::open(rainy_dir)?, clean: ImageSource::open(clean_dir)?, crop, hflip })
    }

    /// Draws per epoch: `max(|rainy|, |clean|)`.
    pub fn epoch_len(&self) -> usize {
        self.rainy.len().max(self.clean.len())
    }

    pub fn rainy_files(&self) -> &[PathBuf] {
        self.rainy.files()
    }

    pub fn clean_files(&self) -> &[PathBuf] {
        self.clean.files()
    }

    /// Indices `(rainy, clean)` of the next draw.
    pub fn draw_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let r = rng.random_range(0..self.rainy.len());
        let c = rng.random_range(0..self.clean.len());
        (r, c)
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<UnpairedBatch> {
        let (ri, ci) = self.draw_indices(rng);
        let rainy = random_crop(self.rainy.get(ri)?, self.crop, rng)?;
        let clean = random_crop(self.clean.get(ci)?, self.crop, rng)?;
        let rainy = augment(rainy, rng, self.hflip);
        let clean = augment(clean, rng, self.hflip);
        Ok(UnpairedBatch { rainy, clean })
    }

    /// Endless stream of batches over the caller's random stream.
    pub fn batches<'a, R: Rng + ?Sized>(&'a mut self, rng: &'a mut R) -> impl Iterator<Item = Result<UnpairedBatch>> + 'a {
        std::iter::repeat_with(move || self.next_batch(rng))
    }
}

/// Opens `rainy_dir`/`clean_dir` for unpaired sampling.
pub fn unpaired_iterator(rainy_dir: &Path, clean_dir: &Path, crop: usize, hflip: bool) -> Result<UnpairedSampler> {
    UnpairedSampler::new(rainy_dir, clean_dir, crop, hflip)
}
