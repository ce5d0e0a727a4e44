//! Generator, discriminator, reference U-net and their diagnostics.

pub mod analysis;
pub mod baseline;
pub mod discriminator;
pub mod generator;
pub mod layers;

use polypgan_tensor::ParamStore;

pub use analysis::{checkerboard_metric, count_params, phase_tile_variance, receptive_field, ParamReport};
pub use baseline::{BaselineConfig, BaselineOutput, BaselineUnet};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig, GeneratorOutput, Upsampling};
pub use layers::Ctx;

/// An instantiated architecture: a kind tag and its named parameters.
pub trait Network {
    fn kind(&self) -> &'static str;
    fn params(&self) -> &ParamStore;
}
