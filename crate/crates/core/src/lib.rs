pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffae;
pub mod diffusion;
pub mod embedders;
pub mod error;
pub mod evaluation;
pub mod finetune;
pub mod image_io;
mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod sampler;
pub mod spn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
