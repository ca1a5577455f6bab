use ndarray::Array2;
use rand::Rng;

use super::graph::{Gradients, Graph, Matrix, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of parameter matrices owned by one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Matrix) -> ParamId {
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        self.add_scaled_uniform(rows, cols, fan_in, 1.0, rng)
    }

    /// Uniform in `[-gain/sqrt(fan_in), gain/sqrt(fan_in)]`.
    pub fn add_scaled_uniform<R: Rng + ?Sized>(
        &mut self,
        rows: usize,
        cols: usize,
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.add(value)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Records every parameter in `graph`; trainable bindings receive
    /// gradients, frozen ones are constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Row-major flattening of every tensor, in store order.
    pub fn to_flat(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.iter().copied().collect()).collect()
    }
}

/// The graph variables a [`ParamStore`] was bound to.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients in store order, zeros where nothing flowed.
    pub fn gradients(&self, graph: &Graph, grads: &Gradients) -> Vec<Matrix> {
        self.vars
            .iter()
            .map(|&v| grads.get_or_zeros(v, graph.shape(v)))
            .collect()
    }
}
