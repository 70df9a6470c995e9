//! A small CNN framework for leaf-disease and seed image classification:
//! tensors, layers with hand-written backward passes, optimizers,
//! augmentation, data protocols, model builders, training, metrics and
//! Grad-CAM.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod image;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::Tensor;
