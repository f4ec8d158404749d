//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a `1 × 1` result walks the record in reverse and
//! returns the gradient of that scalar with respect to every node. Nodes
//! created with [`Tape::constant`] (and everything computed only from
//! constants) are skipped during the backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{log_sigmoid, sigmoid, Matrix};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulScalarVar(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    CausalSoftmax(usize),
    LayerNormRows(usize, f64),
    SelectRows(usize, Vec<usize>),
    PickPerRow(usize, Vec<usize>),
    SliceRows(usize, usize),
    VStack(Vec<usize>),
    Sum(usize),
    MeanRows(usize),
    MeanCols(usize),
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var<'_>) -> Matrix {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.idx];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::scalar(value))
    }

    fn value_of(&self, idx: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    fn grad_flag(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.idx].value.shape(), (1, 1), "backward() needs a scalar");
        let shapes: Vec<_> = nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &*node.value;
            let mut send = |target: usize, delta: Matrix| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| &*nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    send(*a, g.matmul_t(val(*b)));
                    send(*b, val(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    send(*a, g.matmul(val(*b)));
                    send(*b, g.t_matmul(val(*a)));
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(val(*b), |x, y| x * y));
                    send(*b, g.zip_map(val(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    send(*a, g.zip_map(bv, |x, y| x / y));
                    let ga = g.zip_map(out, |x, o| x * o);
                    send(*b, ga.zip_map(bv, |x, y| -x / y));
                }
                Op::AddRow(a, bias) => {
                    send(*a, g.clone());
                    send(*bias, g.mean_rows().scale(g.rows() as f64));
                }
                Op::MulRow(a, gain) => {
                    let gv = val(*gain);
                    let av = val(*a);
                    let mut da = g.clone();
                    let mut dg = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            da[(r, c)] = g[(r, c)] * gv[(0, c)];
                            dg[(0, c)] += g[(r, c)] * av[(r, c)];
                        }
                    }
                    send(*a, da);
                    send(*gain, dg);
                }
                Op::MulScalarVar(a, s) => {
                    let sv = val(*s).item();
                    send(*a, g.scale(sv));
                    let ds = g.zip_map(val(*a), |x, y| x * y).sum();
                    send(*s, Matrix::scalar(ds));
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::AddConst(a) => send(*a, g.clone()),
                Op::Exp(a) => send(*a, g.zip_map(out, |x, o| x * o)),
                Op::Ln(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)),
                Op::Sqrt(a) => send(*a, g.zip_map(out, |x, o| x * 0.5 / o)),
                Op::Tanh(a) => send(*a, g.zip_map(out, |x, o| x * (1.0 - o * o))),
                Op::Sigmoid(a) => send(*a, g.zip_map(out, |x, o| x * o * (1.0 - o))),
                Op::LogSigmoid(a) => send(*a, g.zip_map(val(*a), |x, y| x * sigmoid(-y))),
                Op::Gelu(a) => send(*a, g.zip_map(val(*a), |x, y| x * gelu_grad(y))),
                Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
                    let mut d = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let inner: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                            *dv = y[c] * (gr[c] - inner);
                        }
                    }
                    send(*a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut d = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                            *dv = gr[c] - y[c].exp() * total;
                        }
                    }
                    send(*a, d);
                }
                Op::LayerNormRows(a, eps) => {
                    let av = val(*a);
                    let mut d = Matrix::zeros(g.rows(), g.cols());
                    let n = g.cols() as f64;
                    for r in 0..g.rows() {
                        let x = av.row(r);
                        let mean = x.iter().sum::<f64>() / n;
                        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let y = out.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                            *dv = inv * (gr[c] - mean_g - y[c] * mean_gy);
                        }
                    }
                    send(*a, d);
                }
                Op::SelectRows(a, idx_list) => {
                    let (r, c) = shapes[*a];
                    let mut d = Matrix::zeros(r, c);
                    for (k, &src) in idx_list.iter().enumerate() {
                        for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                            *dv += gv;
                        }
                    }
                    send(*a, d);
                }
                Op::PickPerRow(a, cols) => {
                    let (r, c) = shapes[*a];
                    let mut d = Matrix::zeros(r, c);
                    for (row, &col) in cols.iter().enumerate() {
                        d[(row, col)] = g[(row, 0)];
                    }
                    send(*a, d);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = shapes[*a];
                    let mut d = Matrix::zeros(r, c);
                    for k in 0..g.rows() {
                        d.row_mut(start + k).copy_from_slice(g.row(k));
                    }
                    send(*a, d);
                }
                Op::VStack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = shapes[p].0;
                        send(p, g.slice_rows(offset, offset + rows));
                        offset += rows;
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = shapes[*a];
                    send(*a, Matrix::filled(r, c, g.item()));
                }
                Op::MeanRows(a) => {
                    let (r, c) = shapes[*a];
                    let mut d = Matrix::zeros(r, c);
                    for row in 0..r {
                        for col in 0..c {
                            d[(row, col)] = g[(0, col)] / r as f64;
                        }
                    }
                    send(*a, d);
                }
                Op::MeanCols(a) => {
                    let (r, c) = shapes[*a];
                    let mut d = Matrix::zeros(r, c);
                    for row in 0..r {
                        for col in 0..c {
                            d[(row, col)] = g[(row, 0)] / c as f64;
                        }
                    }
                    send(*a, d);
                }
            }
        }
        Gradients { grads, shapes }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tanh-approximated GELU on a plain matrix (inference path).
pub fn gelu_matrix(m: &Matrix) -> Matrix {
    m.map(gelu)
}

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm_matrix(m: &Matrix, eps: f64) -> Matrix {
    let mut out = m.clone();
    let n = m.cols() as f64;
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.shape()
    }

    /// Value of a `1 × 1` node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, value: Matrix, op: Op) -> Var<'t> {
        let rg = self.tape.grad_flag(self.idx);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Matrix, op: Op) -> Var<'t> {
        let rg = self.tape.grad_flag(self.idx) || self.tape.grad_flag(other.idx);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().matmul(&other.value());
        self.binary(other, v, Op::MatMul(self.idx, other.idx))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().matmul_t(&other.value());
        self.binary(other, v, Op::MatMulT(self.idx, other.idx))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.idx))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().add(&other.value());
        self.binary(other, v, Op::Add(self.idx, other.idx))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().sub(&other.value());
        self.binary(other, v, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.idx, other.idx))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a / b);
        self.binary(other, v, Op::Div(self.idx, other.idx))
    }

    /// Broadcast-adds a `1 × cols` row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let v = self.value().add_row(&bias.value());
        self.binary(bias, v, Op::AddRow(self.idx, bias.idx))
    }

    /// Broadcast-multiplies by a `1 × cols` row.
    pub fn mul_row(self, gain: Var<'t>) -> Var<'t> {
        let gv = gain.value();
        let mut v = (*self.value()).clone();
        assert_eq!((1, v.cols()), gv.shape(), "gain shape");
        for r in 0..v.rows() {
            for (x, g) in v.row_mut(r).iter_mut().zip(gv.data()) {
                *x *= g;
            }
        }
        self.binary(gain, v, Op::MulRow(self.idx, gain.idx))
    }

    /// Multiplies every element by the `1 × 1` node `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        let v = self.value().scale(s.item());
        self.binary(s, v, Op::MulScalarVar(self.idx, s.idx))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.idx, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddConst(self.idx))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.idx))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Ln(self.idx))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().map(f64::sqrt);
        self.unary(v, Op::Sqrt(self.idx))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.idx))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.idx))
    }

    pub fn log_sigmoid(self) -> Var<'t> {
        let v = self.value().map(log_sigmoid);
        self.unary(v, Op::LogSigmoid(self.idx))
    }

    pub fn gelu(self) -> Var<'t> {
        let v = gelu_matrix(&self.value());
        self.unary(v, Op::Gelu(self.idx))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let v = self.value().softmax_rows();
        self.unary(v, Op::SoftmaxRows(self.idx))
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let mut v = (*self.value()).clone();
        for r in 0..v.rows() {
            let lse = crate::tensor::log_sum_exp(v.row(r));
            v.row_mut(r).iter_mut().for_each(|x| *x -= lse);
        }
        self.unary(v, Op::LogSoftmaxRows(self.idx))
    }

    /// Row softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(self) -> Var<'t> {
        let mut v = (*self.value()).clone();
        for r in 0..v.rows() {
            let upto = (r + 1).min(v.cols());
            let row = v.row_mut(r);
            crate::tensor::softmax_in_place(&mut row[..upto]);
            row[upto..].iter_mut().for_each(|x| *x = 0.0);
        }
        self.unary(v, Op::CausalSoftmax(self.idx))
    }

    pub fn layer_norm_rows(self, eps: f64) -> Var<'t> {
        let v = layer_norm_matrix(&self.value(), eps);
        self.unary(v, Op::LayerNormRows(self.idx, eps))
    }

    /// Gathers rows by index (embedding lookup).
    pub fn select_rows(self, idx: &[usize]) -> Var<'t> {
        let v = self.value().select_rows(idx);
        self.unary(v, Op::SelectRows(self.idx, idx.to_vec()))
    }

    /// Picks element `cols[r]` from each row `r`, producing a column.
    pub fn pick_per_row(self, cols: &[usize]) -> Var<'t> {
        let m = self.value();
        assert_eq!(cols.len(), m.rows(), "one column index per row");
        let data = cols.iter().enumerate().map(|(r, &c)| m[(r, c)]).collect();
        let v = Matrix::from_vec(cols.len(), 1, data);
        self.unary(v, Op::PickPerRow(self.idx, cols.to_vec()))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice_rows(start, end);
        self.unary(v, Op::SliceRows(self.idx, start))
    }

    pub fn vstack(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Matrix>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Matrix> = values.iter().map(|m| &**m).collect();
        let v = Matrix::vstack(&refs);
        let rg = parts.iter().any(|p| tape.grad_flag(p.idx));
        tape.push(v, Op::VStack(parts.iter().map(|p| p.idx).collect()), rg)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Matrix::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.idx))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column-wise mean over rows, `1 × cols`.
    pub fn mean_rows(self) -> Var<'t> {
        let v = self.value().mean_rows();
        self.unary(v, Op::MeanRows(self.idx))
    }

    /// Row-wise mean over columns, `rows × 1`.
    pub fn mean_cols(self) -> Var<'t> {
        let m = self.value();
        let data = (0..m.rows()).map(|r| m.row(r).iter().sum::<f64>() / m.cols() as f64).collect();
        let v = Matrix::from_vec(m.rows(), 1, data);
        self.unary(v, Op::MeanCols(self.idx))
    }
}
