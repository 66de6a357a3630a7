pub mod actor_critic;
pub mod checkpoint;
pub mod cli;
pub mod encoding;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod morphology;
pub mod nn;
pub mod set;
pub mod tape;
pub mod td3;
pub mod tensor;
pub mod variants;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
