//! Small convolutional encoder with three decoder heads (UV,
//! segmentation, position-map residual), explicit backprop, Adam, and
//! checkpoint I/O.

mod checkpoint;
pub mod layers;
mod net;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use net::{ConvBlock, ForwardCache, Model, ModelConfig, ModelGrads, ModelOutput};
pub use optim::Adam;
