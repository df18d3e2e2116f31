//! Self-contained reverse-mode automatic differentiation over dense f64
//! tensors, plus the feed-forward networks built on it.

pub mod checkpoint;
pub mod mlp;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, Entry};
pub use mlp::{
    grad_wrt_input, grad_wrt_params, input_jacobians, param_jacobians, vjp_input, vjp_params,
    BoundMlp, Layer, Mlp, MlpSpec,
};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
