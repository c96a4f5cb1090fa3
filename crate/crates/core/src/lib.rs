pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod coords;
pub mod data;
pub mod error;
pub mod fmm;
pub mod gan;
pub mod hypernet;
pub mod imageio;
pub mod inr;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod tensor;

pub use autograd::{grad, no_grad, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
