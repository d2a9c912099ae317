//! Small reverse-mode autodiff engine with the layers, losses and optimizers
//! needed to train desk-scale segmentation networks on the CPU.
//!
//! Everything runs in `f64` on a single thread, so repeated runs with the same
//! seed produce bitwise-identical results.

mod error;
pub mod graph;
pub mod layers;
pub mod loss;
mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;
