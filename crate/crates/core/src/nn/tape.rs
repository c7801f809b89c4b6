//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! [`Gradients`], from which networks pull the gradients of their own
//! parameters. A tape is meant to live for exactly one optimization step;
//! building a fresh one per step is the graph reset.
//!
//! Nodes that do not depend on anything trainable are marked as not requiring
//! gradients, and the reverse pass skips them entirely. Frozen networks (the
//! critic inside the actor loss, say) are registered with
//! [`Tape::frozen_param`] so gradients flow *through* them to their inputs
//! without ever materializing weight gradients.

use std::collections::HashMap;
use std::fmt::Debug;

use super::gaussian::gelu_into;
use super::tensor::Tensor;
use super::Parameter;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable operation implemented outside this module.
///
/// The caller computes the forward value itself and hands it to
/// [`Tape::custom`]; only the vector-Jacobian product lives here.
pub trait CustomOp: Debug {
    /// Returns one gradient per input, shaped like that input. Entries for
    /// inputs that do not need a gradient may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var, Vec<f64>),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SumAll(Var),
    MulCol(Var, Var),
    RowDot(Var, Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<u64, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a network parameter, e.g. the
    /// starting point of an integration whose Jacobian is under test.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Cuts the graph: same value, no gradient path back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Registers a trainable parameter. Repeated calls with the same
    /// parameter return the same node, so a network evaluated ten times in
    /// one integration shares its weights on the tape.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.register(p, true)
    }

    /// Registers a parameter whose gradient is never wanted.
    pub fn frozen_param(&mut self, p: &Parameter) -> Var {
        self.register(p, false)
    }

    fn register(&mut self, p: &Parameter, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            if !trainable || self.nodes[v.0].requires_grad {
                return v;
            }
            // Seen frozen first; the trainable registration replaces it.
        }
        let v = self.push(p.value.clone(), Op::Leaf, trainable);
        self.params.insert(p.id(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if av.shape().len() != 2 || bv.shape().len() != 2 || k != k2 {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    /// `x[r, c] + bias[c]` for every row `r`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.cols() != bv.len() {
            return Err(Error::shape(format!(
                "add_bias {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let mut out = xv.clone();
        let c = bv.len();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what} {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "minimum")?;
        Ok(self.zip(a, b, Op::Minimum(a, b), f64::min))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// GELU with the exact Gaussian CDF, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let rg = self.rg(&[a]);
        let mut data = vec![0.0; xv.len()];
        let mut slope = if rg { vec![0.0; xv.len()] } else { Vec::new() };
        gelu_into(xv.data(), &mut data, rg.then_some(&mut slope[..]));
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping binds.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Per-row normalization over the last dimension followed by an affine
    /// `gain`/`bias` over columns.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != cols || b.len() != cols {
            return Err(Error::shape(format!(
                "layer_norm over {cols} columns with gain {:?}, bias {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            row.copy_from_slice(xv.row(r));
            inv_std[r] = layer_norm_row(row, g.data(), b.data(), &mut xhat[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::matrix(rows, cols, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape(format!(
                    "concat row counts {} vs {}",
                    rows,
                    v.rows()
                )));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, cols, data),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.cols() {
            return Err(Error::shape(format!(
                "slice {start}..{end} of {} columns",
                xv.cols()
            )));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(rows, end - start, data),
            Op::SliceCols(x, start),
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `x[r, :] * c[r]` with `c` shaped `[rows, 1]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(Error::shape(format!(
                "mul_col {:?} by {:?}",
                xv.shape(),
                cv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let k = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(&[x, c]);
        Ok(self.push(out, Op::MulCol(x, c), rg))
    }

    /// Row-wise inner products, `[rows, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (av, bv) = (self.value(a), self.value(b));
        let rows = av.rows();
        let data = (0..rows)
            .map(|r| super::tensor::dot(av.row(r), bv.row(r)))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(rows, 1, data), Op::RowDot(a, b), rg))
    }

    /// Records an externally computed operation with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            // Only inputs keep their gradient; intermediate buffers go back
            // to the allocator right away.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    // dA = G * B^T
                    let (da, beta) = grad_slot(grads, *a, &[m, k]);
                    gemm(m, n, k, g.data(), false, bv.data(), true, da.data_mut(), beta);
                }
                if needs(*b) {
                    // dB = A^T * G
                    let (db, beta) = grad_slot(grads, *b, &[k, n]);
                    gemm(k, m, n, av.data(), true, g.data(), false, db.data_mut(), beta);
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if needs(*b) {
                    let bv = val(*b);
                    let c = bv.len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).expect("bias"));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, zip_map(g, val(*b), |g, y| g * y));
                }
                if needs(*b) {
                    accumulate(grads, *b, zip_map(g, val(*a), |g, x| g * x));
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(g, (x, y))| if x <= y { *g } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).expect("min"));
                }
                if needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(g, (x, y))| if x <= y { 0.0 } else { *g })
                        .collect();
                    accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d).expect("min"));
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let c = *c;
                    accumulate(grads, *a, g.map(|v| v * c));
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::Gelu(a, slope) => {
                if needs(*a) {
                    let d = g.data().iter().zip(slope).map(|(g, s)| g * s).collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).expect("gelu"));
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    accumulate(grads, *a, zip_map(g, &node.value, |g, y| g * (1.0 - y * y)));
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    accumulate(grads, *a, zip_map(g, &node.value, |g, y| g * y));
                }
            }
            Op::Square(a) => {
                if needs(*a) {
                    accumulate(grads, *a, zip_map(g, val(*a), |g, x| 2.0 * g * x));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if needs(*a) {
                    let (lo, hi) = (*lo, *hi);
                    accumulate(
                        grads,
                        *a,
                        zip_map(g, val(*a), |g, x| if x < lo || x > hi { 0.0 } else { g }),
                    );
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let (rows, cols) = (g.rows(), g.cols());
                if needs(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gv.data()[c];
                            sum_d += d;
                            sum_dx += d * xh[c];
                        }
                        let inv = inv_std[r];
                        for c in 0..cols {
                            let d = gr[c] * gv.data()[c];
                            dx[r * cols + c] = inv / n * (n * d - sum_d - xh[c] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, Tensor::matrix(rows, cols, dx));
                }
                if needs(*gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g.data()[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    accumulate(grads, *gain, Tensor::new(gv.shape().to_vec(), dg).expect("gain"));
                }
                if needs(*bias) {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g.data()[r * cols + c];
                        }
                    }
                    let bv = val(*bias);
                    accumulate(grads, *bias, Tensor::new(bv.shape().to_vec(), db).expect("bias"));
                }
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        accumulate(grads, p, Tensor::matrix(rows, pc, d));
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(x, start) => {
                if needs(*x) {
                    let xv = val(*x);
                    let mut d = Tensor::zeros(xv.shape());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()));
                }
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (val(*x), val(*c));
                if needs(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let k = cv.data()[r];
                        d.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    }
                    accumulate(grads, *x, d);
                }
                if needs(*c) {
                    let d = (0..xv.rows())
                        .map(|r| super::tensor::dot(g.row(r), xv.row(r)))
                        .collect();
                    accumulate(grads, *c, Tensor::matrix(xv.rows(), 1, d));
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                for (target, other) in [(*a, bv), (*b, av)] {
                    if needs(target) {
                        let mut d = other.clone();
                        for r in 0..d.rows() {
                            let k = g.data()[r];
                            d.row_mut(r).iter_mut().for_each(|v| *v *= k);
                        }
                        accumulate(grads, target, d);
                    }
                }
            }
            Op::Custom(inputs, op) => {
                let in_vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let needs_grad: Vec<bool> = inputs.iter().map(|&v| needs(v)).collect();
                let gs = op.backward(&in_vals, &node.value, g, &needs_grad);
                for ((&v, gi), need) in inputs.iter().zip(gs).zip(needs_grad) {
                    if let (Some(gi), true) = (gi, need) {
                        accumulate(grads, v, gi);
                    }
                }
            }
        }
    }
}

/// The gradient buffer of `v` and the `beta` to accumulate into it with:
/// 1 if it already holds a partial sum, 0 for a fresh buffer.
fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> (&'a mut Tensor, f64) {
    let beta = if grads[v.0].is_some() { 1.0 } else { 0.0 };
    let t = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    (t, beta)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), d).expect("same shape")
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<u64, Var>,
}

impl Gradients {
    /// Gradient with respect to an input node (a leaf, constant or
    /// parameter); `None` if the loss does not depend on it through a
    /// differentiable path. Intermediate nodes do not keep theirs.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter registered as trainable on the tape.
    pub fn param(&self, p: &Parameter) -> Option<&Tensor> {
        self.params.get(&p.id()).and_then(|&v| self.wrt(v))
    }
}

/// Normalizes `row` in place and applies `gain`/`bias`; the normalized
/// values go to `xhat`. Returns the inverse standard deviation.
pub(crate) fn layer_norm_row(row: &mut [f64], gain: &[f64], bias: &[f64], xhat: &mut [f64]) -> f64 {
    let cols = row.len() as f64;
    let mean = row.iter().sum::<f64>() / cols;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (((v, h), g), b) in row.iter_mut().zip(xhat.iter_mut()).zip(gain).zip(bias) {
        *h = (*v - mean) * inv;
        *v = *h * g + b;
    }
    inv
}

/// `C = A' * B'` (primes optional transposes) into row-major `c`, with
/// `C = beta * C + A' B'`. `a` is `m x k` after transposition and `b` is
/// `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Row-major strides; a transposed operand swaps them.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are exactly m*k, k*n, m*n long for the given strides.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
