//! Dense reverse-mode differentiation, the optimizer, and the LR schedule.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, REL_FLOOR};
pub use graph::{shifted_softplus, sigmoid, softplus, Gradients, Graph, NodeId};
pub use optim::{cosine_lr, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DEFAULT_LR};
pub use params::{glorot, Bound, Linear, Mlp, ParamId, ParamStore};
pub use tensor::Tensor;
