//! Growing differentiable architecture search for recurrent cells.

pub mod analysis;
pub mod bilevel;
pub mod cells;
pub mod error;
pub mod gradcheck;
pub mod morphism;
pub mod rng;
pub mod search;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, TensorError, Var};
