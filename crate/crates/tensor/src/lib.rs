//! Minimal differentiable tensor engine.
//!
//! Values are dense rank-4 `f32` arrays in `(batch, channels, height, width)`
//! layout. Differentiation is tape based: a [`Graph`] records every operation
//! applied during a forward pass and [`Graph::backward`] walks the tape in
//! reverse, accumulating gradients into the bound [`ParamStore`].

mod adam;
mod checkpoint;
mod conv;
mod error;
mod graph;
pub mod gradcheck;
pub mod ops;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState, StepOutcome};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointEntry, CheckpointManifest};
pub use conv::{conv2d, conv_output_extent, transposed_conv2d, transposed_output_extent, ConvSpec};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, NodeId};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Shape, Tensor};
