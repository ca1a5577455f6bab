//! Differentiable-computation substrate: matrices with reverse-mode
//! gradients, dense and gated recurrent layers, Gumbel-Softmax relaxation,
//! cross-entropy and Adam.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;

use ndarray::Array2;
use rand::Rng;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use graph::{Gradients, Graph, Matrix, Var};
pub use layers::{one_hot_rows, Gru, Mlp};
pub use optim::{backward_and_step, Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};

use crate::error::{domain, Result};

/// Standard Gumbel noise `-ln(-ln u)`, `u ~ U(0,1)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| {
        let mut u: f64 = rng.random();
        if u <= 0.0 {
            u = f64::MIN_POSITIVE;
        }
        -(-u.ln()).ln()
    })
}

/// Soft Gumbel-Softmax sample `softmax((logits + g) / tau)`, applied to each
/// column group of `logits` as an independent categorical factor. Gradients
/// flow to `logits` through the softmax; the noise is a constant.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(
    graph: &mut Graph,
    logits: Var,
    groups: &[usize],
    temperature: f64,
    rng: &mut R,
) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(domain(format!(
            "Gumbel-Softmax temperature must be positive, got {temperature}"
        )));
    }
    let (rows, cols) = graph.shape(logits);
    let noise = graph.constant(gumbel_noise(rows, cols, rng));
    let perturbed = graph.add(logits, noise);
    let scaled = graph.scale(perturbed, 1.0 / temperature);
    Ok(graph.softmax_groups(scaled, groups))
}

/// Summed cross-entropy of `logits` rows against class indices.
pub fn cross_entropy(graph: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (rows, cols) = graph.shape(logits);
    if targets.len() != rows {
        return Err(domain(format!(
            "{} targets for {rows} rows of logits",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
        return Err(domain(format!("target {bad} outside {cols} classes")));
    }
    Ok(graph.cross_entropy(logits, targets, &vec![1.0; rows]))
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
