//! Numerical substrate: tensors, reverse-mode differentiation, activations,
//! optimizer, seeded randomness and gradient checking.

pub mod activations;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{sgd_step, Sgd};
pub use rng::{NoiseSource, ReplayNoise, RecordingNoise, Rng, ZeroNoise};
pub use tensor::{Real, Tensor};

use crate::error::Result;

/// `W·x + b` on plain tensors, outside any tape.
pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(xv, wv, Some(bv))?;
    Ok(g.value(y).clone())
}
