//! Central finite differences over parameter stores, for checking analytic
//! gradients. Uses forward evaluations only.

use ndarray::Array2;
use rand::Rng;

use super::graph::{Graph, Var};
use super::layers::{Gru, Mlp};
use super::params::{Bound, ParamStore};
use super::Matrix;

/// Relative error used by the gradient checks:
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` with respect to every scalar in `store`,
/// returned in store order with the same shapes.
pub fn numeric_gradients<F>(store: &ParamStore, h: f64, mut f: F) -> Vec<Matrix>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for t in 0..store.len() {
        let mut g = Matrix::zeros(store.tensors()[t].raw_dim());
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let orig = probe.tensors()[t][[r, c]];
            probe.tensors_mut()[t][[r, c]] = orig + h;
            let up = f(&probe);
            probe.tensors_mut()[t][[r, c]] = orig - h;
            let down = f(&probe);
            probe.tensors_mut()[t][[r, c]] = orig;
            g[[r, c]] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Summary of an analytic-vs-numeric comparison.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub coordinates: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        if self.coordinates == 0 {
            1.0
        } else {
            self.passed as f64 / self.coordinates as f64
        }
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            coordinates: self.coordinates + other.coordinates,
            passed: self.passed + other.passed,
            worst: self.worst.max(other.worst),
        }
    }
}

/// Counts coordinates whose relative error is below `tolerance`.
/// `floor` keeps near-zero gradients from inflating the relative error.
pub fn compare(analytic: &[Matrix], numeric: &[Matrix], tolerance: f64, floor: f64) -> GradCheck {
    let mut check = GradCheck {
        coordinates: 0,
        passed: 0,
        worst: 0.0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.iter().zip(n.iter()) {
            let err = relative_error(x, y, floor);
            check.coordinates += 1;
            if err < tolerance {
                check.passed += 1;
            }
            check.worst = check.worst.max(err);
        }
    }
    check
}

/// Random feed-forward network of 1-3 hidden layers on a random batch, scored
/// by cross-entropy plus a smooth side branch (sigmoid, tanh, products, slices)
/// so that every graph operation used by the models is exercised.
pub fn random_mlp_case(seed: u64, h: f64, tolerance: f64, floor: f64) -> crate::Result<GradCheck> {
    let mut rng = crate::rng::seeded(seed);
    let depth = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(2..=8)];
    for _ in 0..depth {
        sizes.push(rng.random_range(3..=10));
    }
    let classes = rng.random_range(2..=5);
    sizes.push(2 * classes);
    let rows = rng.random_range(1..=4);
    let mut store = ParamStore::new();
    let net = Mlp::new(&mut store, &sizes, &mut rng);
    let x = Array2::from_shape_fn((rows, sizes[0]), |_| rng.random_range(-1.0..1.0));
    let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let weights: Vec<f64> = (0..rows).map(|_| rng.random_range(0.2..1.0)).collect();
    let record = |g: &mut Graph, bound: &Bound| -> crate::Result<Var> {
        let input = g.constant(x.clone());
        let out = net.forward(g, bound, input)?;
        let head = g.slice_cols(out, 0, classes);
        let side = g.slice_cols(out, classes, classes);
        let ce = g.cross_entropy(head, &targets, &weights);
        let s = g.sigmoid(side);
        let t = g.tanh(head);
        let keep = g.one_minus(s);
        let prod = g.mul(keep, t);
        let diff = g.sub(prod, s);
        let halved = g.scale(diff, 0.5);
        let soft = g.softmax_groups(halved, &[1, classes - 1]);
        let both = g.concat_rows(&[soft, halved]);
        let tail = g.slice_rows(both, rows, rows);
        let extra = g.add(tail, soft);
        let summed = g.sum(extra);
        let parts = g.concat_cols(&[ce, summed]);
        Ok(g.sum(parts))
    };
    check_store(&store, h, tolerance, floor, record)
}

/// Random gated recurrent encoder over a ragged batch, followed by a linear
/// read-out and cross-entropy.
pub fn random_gru_case(seed: u64, h: f64, tolerance: f64, floor: f64) -> crate::Result<GradCheck> {
    let mut rng = crate::rng::seeded(seed);
    let input = rng.random_range(2..=5);
    let hidden = rng.random_range(2..=8);
    let rows = rng.random_range(1..=4);
    let mut lengths: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=5)).collect();
    lengths.sort_unstable_by(|a, b| b.cmp(a));
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, input, hidden, &mut rng);
    let readout = Mlp::new(&mut store, &[hidden, 3], &mut rng);
    let steps: Vec<Matrix> = (0..lengths[0])
        .map(|t| {
            let active = lengths.iter().take_while(|&&l| l > t).count();
            Array2::from_shape_fn((active, input), |_| rng.random_range(-1.0..1.0))
        })
        .collect();
    let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();
    let record = |g: &mut Graph, bound: &Bound| -> crate::Result<Var> {
        let xs: Vec<Var> = steps.iter().map(|m| g.constant(m.clone())).collect();
        let state = gru.forward_ragged(g, bound, rows, &xs)?;
        let logits = readout.forward(g, bound, state)?;
        Ok(g.cross_entropy(logits, &targets, &vec![1.0; rows]))
    };
    check_store(&store, h, tolerance, floor, record)
}

/// Compares backpropagated gradients of the scalar recorded by `record`
/// against central differences.
pub fn check_store<F>(store: &ParamStore, h: f64, tolerance: f64, floor: f64, record: F) -> crate::Result<GradCheck>
where
    F: Fn(&mut Graph, &Bound) -> crate::Result<Var>,
{
    let mut graph = Graph::new();
    let bound = store.bind(&mut graph, true);
    let loss = record(&mut graph, &bound)?;
    let grads = graph.backward(loss)?;
    let analytic = bound.gradients(&graph, &grads);
    let numeric = numeric_gradients(store, h, |s| {
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        record(&mut g, &b).map(|v| g.scalar(v)).unwrap_or(f64::NAN)
    });
    Ok(compare(&analytic, &numeric, tolerance, floor))
}
