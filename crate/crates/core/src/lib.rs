//! Conditional-GAN polyp image synthesis at desk scale: conditioned-input
//! construction, synthetic masks, generator/discriminator models, training,
//! detection metrics and a procedural dataset.

pub mod canny;
pub mod conditioning;
pub mod detection;
pub mod error;
pub mod imageio;
pub mod manifest;
pub mod mask;
pub mod mask_synth;
pub mod models;
pub mod pipeline;
pub mod seed;
pub mod synth_data;
pub mod training;

pub use error::{Error, Result};
pub use mask::{BinaryMask, PixelBounds};
