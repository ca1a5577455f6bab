use ndarray::{s, Array2};
use rand::Rng;

use super::graph::{sigmoid, Graph, Matrix, Var};
use super::params::{Bound, ParamId, ParamStore};
use crate::error::{domain, Result};

/// Weight scale for rectifier layers, `sqrt(6 / fan_in)` overall.
const RELU_GAIN: f64 = 2.449_489_742_783_178;

/// Feed-forward network: affine layers with rectifiers in between and a
/// linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let weight = store.add_scaled_uniform(w[0], w[1], w[0], RELU_GAIN, rng);
                let bias = store.add_uniform(1, w[1], w[0], rng);
                (weight, bias)
            })
            .collect();
        Self {
            sizes: sizes.to_vec(),
            layers,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// `(weight, bias)` parameter ids per layer; weights are `in x out`.
    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn forward(&self, graph: &mut Graph, params: &Bound, input: Var) -> Result<Var> {
        let width = graph.shape(input).1;
        if width != self.input_size() {
            return Err(domain(format!(
                "MLP expects input width {}, got {width}",
                self.input_size()
            )));
        }
        let mut x = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let h = graph.matmul(x, params.var(w));
            x = graph.add_row(h, params.var(b));
            if i + 1 < self.layers.len() {
                x = graph.relu(x);
            }
        }
        Ok(x)
    }

    /// Forward pass on plain matrices, without recording.
    pub fn predict(&self, store: &ParamStore, input: &Matrix) -> Result<Matrix> {
        if input.ncols() != self.input_size() {
            return Err(domain(format!(
                "MLP expects input width {}, got {}",
                self.input_size(),
                input.ncols()
            )));
        }
        let mut x = input.clone();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            x = x.dot(store.get(w)) + store.get(b);
            if i + 1 < self.layers.len() {
                x.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(x)
    }
}

/// Gated recurrent cell with update and reset gates.
///
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + (r ⊙ h) Un + bn)`, `h' = (1 - z) ⊙ n + z ⊙ h`.
///
/// The input weights of all three gates share one `in x 3H` matrix
/// (columns `[z | r | n]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    input_size: usize,
    hidden_size: usize,
    ids: GruIds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GruIds {
    w: ParamId,
    u_zr: ParamId,
    u_n: ParamId,
    b: ParamId,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let h = hidden_size;
        let ids = GruIds {
            w: store.add_uniform(input_size, 3 * h, h, rng),
            u_zr: store.add_uniform(h, 2 * h, h, rng),
            u_n: store.add_uniform(h, h, h, rng),
            b: store.add_uniform(1, 3 * h, h, rng),
        };
        Self {
            input_size,
            hidden_size,
            ids,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    fn ids(&self) -> GruIds {
        self.ids
    }

    /// One cell application.
    pub fn step(&self, graph: &mut Graph, params: &Bound, x: Var, h: Var) -> Var {
        let ids = self.ids();
        let hs = self.hidden_size;
        let xw = graph.matmul(x, params.var(ids.w));
        let xw = graph.add_row(xw, params.var(ids.b));
        let hu = graph.matmul(h, params.var(ids.u_zr));
        let xzr = graph.slice_cols(xw, 0, 2 * hs);
        let pre = graph.add(xzr, hu);
        let zr = graph.sigmoid(pre);
        let z = graph.slice_cols(zr, 0, hs);
        let r = graph.slice_cols(zr, hs, hs);
        let rh = graph.mul(r, h);
        let rhu = graph.matmul(rh, params.var(ids.u_n));
        let xn = graph.slice_cols(xw, 2 * hs, hs);
        let npre = graph.add(xn, rhu);
        let n = graph.tanh(npre);
        let keep = graph.one_minus(z);
        let a = graph.mul(keep, n);
        let b = graph.mul(z, h);
        graph.add(a, b)
    }

    /// Runs the cell over `sequence` from a zero hidden state and returns the
    /// final hidden state. Every element must have the same batch size.
    pub fn forward(&self, graph: &mut Graph, params: &Bound, sequence: &[Var]) -> Result<Var> {
        let first = *sequence
            .first()
            .ok_or_else(|| domain("recurrent encoder needs a nonempty sequence"))?;
        let rows = graph.shape(first).0;
        for &x in sequence {
            let (r, c) = graph.shape(x);
            if r != rows || c != self.input_size {
                return Err(domain(format!(
                    "sequence element has shape {r}x{c}, expected {rows}x{}",
                    self.input_size
                )));
            }
        }
        let mut h = graph.constant(Array2::zeros((rows, self.hidden_size)));
        for &x in sequence {
            h = self.step(graph, params, x, h);
        }
        Ok(h)
    }

    /// Runs over ragged sequences. `steps[t]` holds the inputs of the rows
    /// still active at time `t`; rows must be ordered by decreasing length so
    /// that the active rows at every step form a prefix. Returns the hidden
    /// state each row had after its own last input.
    pub fn forward_ragged(
        &self,
        graph: &mut Graph,
        params: &Bound,
        rows: usize,
        steps: &[Var],
    ) -> Result<Var> {
        if steps.is_empty() {
            return Err(domain("recurrent encoder needs a nonempty sequence"));
        }
        let mut h = graph.constant(Array2::zeros((rows, self.hidden_size)));
        let mut active = rows;
        for &x in steps {
            let n = graph.shape(x).0;
            if n > active || n == 0 {
                return Err(domain("ragged steps must shrink monotonically and stay nonempty"));
            }
            let head = if n == rows {
                h
            } else {
                graph.slice_rows(h, 0, n)
            };
            let next = self.step(graph, params, x, head);
            h = if n == rows {
                next
            } else {
                let tail = graph.slice_rows(h, n, rows - n);
                graph.concat_rows(&[next, tail])
            };
            active = n;
        }
        Ok(h)
    }

    /// Plain-matrix forward pass over a full (non-ragged) sequence.
    pub fn predict(&self, store: &ParamStore, sequence: &[Matrix]) -> Result<Matrix> {
        let first = sequence
            .first()
            .ok_or_else(|| domain("recurrent encoder needs a nonempty sequence"))?;
        let ids = self.ids();
        let hs = self.hidden_size;
        let mut h = Array2::<f64>::zeros((first.nrows(), hs));
        for x in sequence {
            let xw = x.dot(store.get(ids.w)) + store.get(ids.b);
            let mut zr = xw.slice(s![.., 0..2 * hs]).to_owned() + h.dot(store.get(ids.u_zr));
            zr.mapv_inplace(sigmoid);
            let z = zr.slice(s![.., 0..hs]).to_owned();
            let r = zr.slice(s![.., hs..2 * hs]).to_owned();
            let mut n = xw.slice(s![.., 2 * hs..3 * hs]).to_owned() + (&r * &h).dot(store.get(ids.u_n));
            n.mapv_inplace(f64::tanh);
            h = z.mapv(|v| 1.0 - v) * &n + &z * &h;
        }
        Ok(h)
    }
}

/// One-hot rows for a batch of indices.
pub fn one_hot_rows(indices: &[usize], width: usize) -> Matrix {
    let mut m = Array2::zeros((indices.len(), width));
    for (i, &k) in indices.iter().enumerate() {
        m[[i, k]] = 1.0;
    }
    m
}
