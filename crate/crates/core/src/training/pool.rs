use derain_tensor::{Real, Tensor};
use rand::Rng;

/// History of generated images shown to a discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool<T> {
    capacity: usize,
    images: Vec<Tensor<T>>,
}

impl<T: Real> ImagePool<T> {
    pub fn new(capacity: usize) -> Self {
        ImagePool { capacity, images: Vec::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    pub fn restore(capacity: usize, images: Vec<Tensor<T>>) -> Self {
        ImagePool { capacity, images }
    }

    /// Pass-through at capacity 0; while filling, stores and returns `fresh`;
    /// once full, with probability 0.5 swaps `fresh` for a random stored image
    /// and returns the stored one. Draws nothing at capacity 0.
    pub fn query<R: Rng + ?Sized>(&mut self, fresh: Tensor<T>, rng: &mut R) -> Tensor<T> {
        if self.capacity == 0 {
            return fresh;
        }
        if self.images.len() < self.capacity {
            self.images.push(fresh.clone());
            return fresh;
        }
        if rng.random_bool(0.5) {
            let i = rng.random_range(0..self.images.len());
            std::mem::replace(&mut self.images[i], fresh)
        } else {
            fresh
        }
    }
}
