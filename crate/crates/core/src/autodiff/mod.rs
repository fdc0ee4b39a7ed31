//! Dense tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    evaluate_with_gradients, grad_check, grad_check_with, relative_error, Stencil, GradCheckReport, ParamCheck,
    DEFAULT_STEP,
};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub(crate) use graph::softmax_row;
pub use tensor::Tensor;
