//! Dense tensors, a reverse-mode tape, and seeded randomness.

mod gradcheck;
mod graph;
pub mod io;
pub mod nn;
mod params;
mod rng;
mod value;

pub use gradcheck::{check_gradients, check_param_gradients, STEP};
pub use graph::{Along, Binary, Gradients, Graph, Operand, Reduction, Unary, Var};
pub use params::{ParamGrads, ParamId, ParamStore, Tape};
pub use rng::RngStream;
pub use value::Tensor;
