//! Dense tensors, reverse-mode differentiation, Adam and gradient checking.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{
    finite_diff_grad_check, relative_error, CoordinateCheck, GradCheckConfig, GradCheckReport,
};
pub use graph::{
    gelu, log_sigmoid, sigmoid, softmax_rows, Gradients, Graph, ParamId, ParamStore, Var,
};
pub use optim::{AdamConfig, AdamState};
pub use tensor::Tensor;
