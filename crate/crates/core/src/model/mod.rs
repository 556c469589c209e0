//! The flow-predicting network: a small convolutional encoder-decoder with
//! hand-written reverse-mode gradients and a momentum SGD optimizer.

mod checkpoint;
mod net;
pub mod ops;
mod params;
pub mod real;
mod sgd;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointIndex};
pub use net::{backward, forward, forward_frozen, forward_sized, ForwardCache};
pub use params::{LayerSpec, ModelParams, ParamBlock, ParamGrads, Params, ARCHITECTURE};
pub use real::Real;
pub use sgd::{sgd_step, OptimizerState, SgdConfig};
