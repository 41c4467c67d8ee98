//! Dense tensors, reverse-mode autodiff, spiking neurons and Adam.

mod adam;
pub mod conv;
pub mod gradcheck;
mod graph;
mod lif;
mod params;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{surrogate, BatchStats, Graph, SpikeMode, Var, PROB_FLOOR};
pub use lif::{lif_step, surrogate_grad, LifParams, LifState};
pub use params::ParamStore;
pub use real::{gemm, Layout, Real};
pub use tensor::Tensor;
pub(crate) use graph::pool_bins;
