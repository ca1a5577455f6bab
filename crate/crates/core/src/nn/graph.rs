//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass in creation order,
//! which is already a topological order. [`Graph::backward`] walks the record
//! in reverse and accumulates gradients additively, so a value consumed by
//! several operations receives the sum of their contributions.
//!
//! All values are `rows x cols` matrices of `f64`; rows are batch entries.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SoftmaxGroups(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::OneMinus(..) => "one_minus",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SoftmaxGroups(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Computation record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<(&'static str, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.iter().all(|x| x.is_finite()) {
            self.fault = Some((op.name(), self.nodes.len()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A value whose gradient is reported by [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 x k` row over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 - x);
        let ng = self.ng(&[a]);
        self.push(value, Op::OneMinus(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Row-wise softmax applied independently to consecutive column groups.
    pub fn softmax_groups(&mut self, a: Var, groups: &[usize]) -> Var {
        assert_eq!(
            groups.iter().sum::<usize>(),
            self.shape(a).1,
            "softmax groups must cover every column"
        );
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let mut start = 0;
            for &len in groups {
                let mut block = row.slice_mut(s![start..start + len]);
                let max = block.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                block.mapv_inplace(|x| (x - max).exp());
                let total = block.sum();
                block.mapv_inplace(|x| x / total);
                start += len;
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::SoftmaxGroups(a, groups.to_vec()), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let cols = self.shape(a).1;
        self.softmax_groups(a, &[cols])
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]` as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let x = self.value(logits);
        let (rows, cols) = x.dim();
        assert_eq!(targets.len(), rows, "one target per row");
        assert_eq!(weights.len(), rows, "one weight per row");
        let mut probs = x.clone();
        let mut total = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let t = targets[i];
            assert!(t < cols, "target {t} out of range for {cols} classes");
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let target_logit = row[t];
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
            total += weights[i] * (max + z.ln() - target_logit);
        }
        let value = Array2::from_elem((1, 1), total);
        let ng = self.ng(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    /// Fails if any forward value so far was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.fault {
            None => Ok(()),
            Some((op, node)) => Err(Error::NonFinite {
                op,
                context: format!("forward value of node {node}"),
            }),
        }
    }

    /// Propagates d(output)/d(node) for every node that needs a gradient.
    /// `output` must be a `1 x 1` node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check_finite()?;
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for index in (0..=output.0).rev() {
            let node = &self.nodes[index];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            if !upstream.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    context: format!("gradient at node {index}"),
                });
            }
            self.propagate(node, &upstream, &mut grads);
            grads[index] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, up: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut send = |v: Var, g: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    send(*a, up.dot(&self.value(*b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, self.value(*a).t().dot(up));
                }
            }
            Op::AddRow(a, row) => {
                send(*a, up.clone());
                if self.nodes[row.0].needs_grad {
                    send(*row, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                send(*a, up.clone());
                send(*b, up.clone());
            }
            Op::Sub(a, b) => {
                send(*a, up.clone());
                send(*b, -up);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    send(*a, up * self.value(*b));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, up * self.value(*a));
                }
            }
            Op::Scale(a, k) => send(*a, up * *k),
            Op::OneMinus(a) => send(*a, -up),
            Op::Relu(a) => {
                let mut g = up.clone();
                Zip::from(&mut g)
                    .and(self.value(*a))
                    .for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                send(*a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = up.clone();
                Zip::from(&mut g)
                    .and(&node.value)
                    .for_each(|g, &y| *g *= y * (1.0 - y));
                send(*a, g);
            }
            Op::Tanh(a) => {
                let mut g = up.clone();
                Zip::from(&mut g)
                    .and(&node.value)
                    .for_each(|g, &y| *g *= 1.0 - y * y);
                send(*a, g);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    send(*p, up.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut g = Array2::zeros(self.shape(*a));
                let w = up.ncols();
                g.slice_mut(s![.., *start..*start + w]).assign(up);
                send(*a, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    send(*p, up.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut g = Array2::zeros(self.shape(*a));
                let h = up.nrows();
                g.slice_mut(s![*start..*start + h, ..]).assign(up);
                send(*a, g);
            }
            Op::SoftmaxGroups(a, groups) => {
                let y = &node.value;
                let mut g = up.clone();
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let mut start = 0;
                    for &len in groups {
                        let yb = yrow.slice(s![start..start + len]);
                        let mut gb = grow.slice_mut(s![start..start + len]);
                        let dot: f64 = gb.iter().zip(yb.iter()).map(|(g, y)| g * y).sum();
                        Zip::from(&mut gb).and(&yb).for_each(|g, &y| *g = y * (*g - dot));
                        start += len;
                    }
                }
                send(*a, g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = up[[0, 0]];
                let mut g = probs.clone();
                for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                    row[targets[i]] -= 1.0;
                    let w = scale * weights[i];
                    row.mapv_inplace(|v| v * w);
                }
                send(*logits, g);
            }
            Op::Sum(a) => {
                let scale = up[[0, 0]];
                send(*a, Array2::from_elem(self.shape(*a), scale));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of a backward pass: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; `None` when no gradient
    /// reached it (constants, or values the output does not depend on).
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled to `shape` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}
