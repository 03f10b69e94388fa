//! Unpaired single-image deraining: a two-generator cycle translation model
//! guided by dual contrastive losses over encoder features.

pub mod data;
pub mod desk;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod losses;
pub mod networks;
pub mod rain;
pub mod training;

pub use error::{DerainError, Result};
pub use image::ImageTensor;
