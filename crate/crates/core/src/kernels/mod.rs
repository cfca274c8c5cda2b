//! Forward and backward numerical kernels. These operate on plain tensors;
//! [`crate::tape`] wires them into the differentiation graph.

pub mod conv;
pub mod sample;

pub use conv::{
    conv2d_backward_input, conv2d_backward_params, conv2d_forward,
    conv_transpose2d_backward_input, conv_transpose2d_backward_params, conv_transpose2d_forward,
    ConvSpec,
};
pub use sample::{offsets_to_coords, sample_backward, sample_forward};
