//! Reverse-mode layer library for 2D fully convolutional segmentation nets.
//!
//! Networks are DAGs of [`LayerNode`]s over NCHW [`Tensor`]s. Learnable
//! tensors live in a [`ParamStore`] so a graph can be inspected (parameter
//! counts, output shapes) without allocating weights.

pub mod checkpoint;
pub mod error;
pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

/// Floating point type used for all values.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub use error::{GradError, Result};
pub use gradcheck::{finite_difference_check, relative_error, FdConfig, FdTarget};
pub use graph::{
    Activations, CropOffset, Graph, LayerKind, LayerNode, NodeGrads, NodeId, ParamRole, ParamSpec,
    ParamStore,
};
pub use ops::FuseMode;
pub use tensor::Tensor;
