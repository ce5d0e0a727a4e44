//! Adversarial training with multi-scale reconstruction losses.

pub mod data;
pub mod losses;
pub mod trainer;

pub use data::{conditioned_to_tensor, jitter, jitter_extent, rgb_to_tensor, tensor_to_rgb, TrainingPair};
pub use losses::{d_loss, g_gan_loss, recon_loss, total_g_loss, ReconTerms, LOSS_EPS};
pub use trainer::{generate, train, GeneratorPass, GeneratorUpdate, StepReport, Trainer, TrainingConfig, TrainingRun};
