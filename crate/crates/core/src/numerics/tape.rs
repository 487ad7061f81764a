//! Matrix-valued reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node ids are therefore a
//! topological order and backward is a single reverse sweep. A tape supports
//! exactly one [`Tape::backward`] call.

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::pcc::{check_pcc_operands, Standardized};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + 1·bias`, bias is 1×cols.
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ConcatCols(Var, Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var),
    Sum(Var),
    Frobenius(Var),
    Pcc {
        a: Var,
        b: Var,
        sa: Standardized,
        sb: Standardized,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient, or zeros of the node's shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row_bias",
                format!(
                    "bias {}x{} for input {}x{}",
                    bv.rows(),
                    bv.cols(),
                    xv.rows(),
                    xv.cols()
                ),
            ));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).scale(k);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).log_softmax_rows();
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmaxRows(x), rg)
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::NormalizeRows(x), rg)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean of all entries as a 1×1 node.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `sqrt(Σ x²)` as a 1×1 node. The gradient at the origin is taken as zero.
    pub fn frobenius(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).frobenius_norm());
        let rg = self.rg(x);
        self.push(value, Op::Frobenius(x), rg)
    }

    /// Row-by-row Pearson correlation, `r×D` with `s×D` giving `r×s`.
    pub fn pcc_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_pcc_operands(av, bv)?;
        let sa = Standardized::new(av);
        let sb = Standardized::new(bv);
        let value = sa.correlate(&sb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Pcc { a, b, sa, sb }, rg))
    }

    /// Reverse sweep from a 1×1 `loss`. Consumes the tape's single backward.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeState("backward already ran on this tape".into()));
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {}x{}", shape.0, shape.1),
            ));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, contrib) in self.local_backward(id, &g)? {
                if !self.rg(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn local_backward(&self, id: usize, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let node = &self.nodes[id];
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.rg(a) {
                    v.push((a, g.matmul_transposed(self.value(b))?));
                }
                if self.rg(b) {
                    v.push((b, self.value(a).transpose().matmul(g)?));
                }
                v
            }
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-1.0))],
            &Op::Mul(a, b) => vec![
                (a, g.hadamard(self.value(b))?),
                (b, g.hadamard(self.value(a))?),
            ],
            &Op::AddRowBias(x, bias) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![(x, g.clone()), (bias, gb)]
            }
            &Op::Scale(x, k) => vec![(x, g.scale(k))],
            &Op::Relu(x) => {
                let gx = g.zip_with(self.value(x), "relu_backward", |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else {
                        0.0
                    }
                })?;
                vec![(x, gx)]
            }
            &Op::ConcatCols(a, b) => {
                let wa = self.value(a).cols();
                let wb = self.value(b).cols();
                vec![(a, g.slice_cols(0, wa)?), (b, g.slice_cols(wa, wb)?)]
            }
            &Op::LogSoftmaxRows(x) => {
                // ∂/∂x_j = g_j - softmax_j · Σ_k g_k
                let mut gx = g.clone();
                for r in 0..gx.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (o, y) in gx.row_mut(r).iter_mut().zip(out.row(r)) {
                        *o -= y.exp() * total;
                    }
                }
                vec![(x, gx)]
            }
            &Op::NormalizeRows(x) => {
                // y = x/‖x‖, ∂/∂x = (g - y (y·g)) / ‖x‖
                let xv = self.value(x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let yg: f64 = y.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y) {
                        *o = (gv - yv * yg) / n;
                    }
                }
                vec![(x, gx)]
            }
            &Op::Sum(x) => {
                let (r, c) = self.value(x).shape();
                vec![(x, Matrix::filled(r, c, g.item()))]
            }
            &Op::Frobenius(x) => {
                let norm = out.item();
                let xv = self.value(x);
                let gx = if norm == 0.0 {
                    Matrix::zeros(xv.rows(), xv.cols())
                } else {
                    xv.scale(g.item() / norm)
                };
                vec![(x, gx)]
            }
            Op::Pcc { a, b, sa, sb } => {
                let mut v = Vec::with_capacity(2);
                if self.rg(*a) {
                    v.push((*a, sa.backward(sb, out, g)));
                }
                if self.rg(*b) {
                    v.push((*b, sb.backward(sa, &out.transpose(), &g.transpose())));
                }
                v
            }
        })
    }
}
