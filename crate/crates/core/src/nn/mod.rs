//! Minimal differentiable building blocks shared by the segmentation and
//! discrepancy networks.

mod graph;
mod loss;
mod optim;
mod params;
mod tensor;

pub(crate) use graph::correlation_forward;
pub use graph::{selu, CorrelationMode, Gradients, Graph, NodeId, SELU_ALPHA, SELU_LAMBDA};
pub use loss::{softmax_channels, weighted_cross_entropy};
pub use optim::{add_grads, scale_grads, Adam};
pub use params::{Param, ParamId, ParamSet};
pub use tensor::Tensor;
