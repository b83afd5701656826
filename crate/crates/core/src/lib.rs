pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use network::{AttentionUNet, ModelConfig, ParameterSet};
pub use tensor::Tensor;
