//! Layers with explicit forward and backward passes, and the graph that
//! wires them together.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod graph;
pub mod norm;
pub mod pool;

pub use activation::{cross_entropy, relu_backward, relu_forward, softmax_backward, softmax_forward};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry, Padding};
pub use graph::{
    Architecture, ArchitectureBuilder, Gradients, Graph, Mode, NodeDef, Op, RngState,
};
