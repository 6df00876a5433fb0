//! Dense tensors with reverse-mode differentiation and the primitive layers the model is
//! assembled from.

mod conv;
mod element;
pub mod gradcheck;
pub(crate) mod kernels;
mod linalg;
mod nn;
mod ops;
mod tensor;

pub use conv::{conv2d, conv_out_extent, conv_transpose2d, conv_transpose_out_extent};
pub use element::{DType, Element};
pub use gradcheck::{finite_diff_grad_check, GradCheckOptions, GradEntry, GradReport};
pub use nn::{
    attention_probs, batch_norm2d, gelu, layer_norm, mlp, multi_head_attention,
    scaled_dot_attention, set_gelu_backward_fault, AttentionParams, MlpParams,
};
pub use tensor::Tensor;
