//! EEG emotion classification with a convolution + transformer network:
//! signal preprocessing, a reverse-mode differentiable model with
//! selective-kernel channel attention, the training and cross-validation
//! harness, and interpretability exports.

pub mod autograd;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use model::{Ablation, ForwardTrace, Mactn, ModelConfig};
pub use tensor::Tensor;
