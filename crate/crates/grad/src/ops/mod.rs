//! Layer kernels: forward and backward for every layer kind the graph supports.

pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod pool;

pub use conv::{
    conv2d, conv2d_backward, conv_out_extent, conv_transpose_out_extent, transposed_conv2d,
    transposed_conv2d_backward, ConvGrads,
};
pub use elementwise::{crop_align, crop_align_backward, fuse, fuse_backward, relu, relu_backward, FuseMode};
pub use loss::{softmax_channels, softmax_multinomial_loss};
pub use pool::{maxpool2d, maxpool2d_backward, pool_out_extent};
