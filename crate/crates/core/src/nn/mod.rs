//! Minimal CPU network substrate: layers with hand-written backward passes,
//! losses, first-order optimizers, and a binary weight container.

mod gemm;
pub mod gradcheck;
mod graph;
pub mod io;
mod layers;
pub mod loss;
mod optim;
mod tensor;

pub use graph::{LayerGraph, Mode};
pub use layers::{softmax_row, Activation, Init, LayerSpec, Parameter};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::{argmax, Tensor};

/// Zeroes the gradients of every parameter in `graphs`.
pub fn zero_grads(graphs: &mut [&mut LayerGraph]) {
    for g in graphs {
        g.zero_grad();
    }
}
