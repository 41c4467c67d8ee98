//! Leaky integrate-and-fire neuron outside the autodiff graph.

use crate::nn::graph::surrogate;

/// Membrane potential and last spike of a single neuron.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LifState {
    pub v: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    /// Membrane decay per step.
    pub alpha: f64,
    /// Firing threshold.
    pub theta: f64,
    /// Surrogate window width.
    pub width: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            theta: 0.3,
            width: 1.0,
        }
    }
}

/// One update: decay the potential, reset it if the neuron just fired,
/// add the input and fire at or above threshold.
pub fn lif_step(state: LifState, x: f64, params: &LifParams) -> LifState {
    let v = params.alpha * state.v * (1.0 - state.p) + x;
    let p = if v >= params.theta { 1.0 } else { 0.0 };
    LifState { v, p }
}

/// Surrogate derivative of the spike with respect to the potential.
pub fn surrogate_grad(v: f64, params: &LifParams) -> f64 {
    surrogate(v - params.theta, params.width)
}
