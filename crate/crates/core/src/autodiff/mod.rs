//! Reverse-mode differentiation for dense networks, plus the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
mod network;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{chain, grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use network::{
    Activation, BoundNetwork, DenseNetwork, Init, Layer, NetworkGradients, Trace, LEAKY_SLOPE,
};
