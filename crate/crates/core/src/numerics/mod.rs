//! Dense tensors, a reverse-mode tape, the neural primitives the model is
//! built from, Adam, and a finite-difference gradient checker.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use nn::{argmax, lstm_cell_step, self_attention, softmax_cross_entropy, Initializer};
pub use tensor::{Gradients, ParamId, ParamStore, Scalar, Tensor};
