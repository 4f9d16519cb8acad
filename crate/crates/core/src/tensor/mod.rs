//! Dense linear algebra, named parameter sets and the first-order training
//! primitives the model and the federated simulation are built on.

pub(crate) mod checkpoint;
mod matrix;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use matrix::{dropout_mask, dropout_mask_with, sigmoid, sigmoid_scalar, tanh_m, xavier_init, xavier_init_with, Matrix};
pub use params::{clip_gradients, sgd_step, ParamSet, ParamTag, ParamTensor};
