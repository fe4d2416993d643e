//! Dense tensors and the reverse-mode tape used to train every model.

mod dropout;
mod gradcheck;
mod graph;
mod tensor;

pub use dropout::{maybe_dropout, Dropout};
pub use gradcheck::{finite_difference_check, finite_difference_check_params, relative_error, GradCheck, REL_ERROR_FLOOR};
pub use graph::{
    log_sigmoid_scalar, sigmoid_scalar, softmax_rows_masked, Gradients, Graph, ParamId,
    ParamStore, Var,
};
pub use tensor::Tensor;

/// Layer-normalisation epsilon used unless a model config overrides it.
pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
