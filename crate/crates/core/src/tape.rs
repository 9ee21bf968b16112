//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Operations evaluate eagerly and append a node holding their output and
//! whatever the backward rule needs. Node ids are handed out in execution
//! order, so every node's inputs precede it and a single reverse sweep
//! visits each edge once.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::math;
use crate::ssm::{self, ScanKernel};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Silu,
    Softplus,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => math::sigmoid(x),
            Activation::Tanh => math::tanh(x),
            Activation::Silu => x * math::sigmoid(x),
            Activation::Softplus => math::softplus(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative at `x`, given `y = apply(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                let s = math::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Softplus => {
                if x > math::SOFTPLUS_LINEAR_THRESHOLD {
                    1.0
                } else {
                    math::sigmoid(x)
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "silu" => Activation::Silu,
            "softplus" => Activation::Softplus,
            "relu" => Activation::Relu,
            other => return Err(Error::Config(alloc::format!("unknown activation `{other}`"))),
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Exp(Var),
    Elementwise {
        x: Var,
        derivative: fn(f64) -> f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
    },
    Concat(Vec<Var>),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GroupSum {
        x: Var,
        k: usize,
    },
    Interp {
        x: Var,
        idx: Vec<usize>,
        weights: Vec<f64>,
        k: usize,
    },
    RowNorm(Var),
    Sum(Var),
    Mean(Var),
    Scan(Box<ScanNode>),
}

use alloc::boxed::Box;

#[derive(Debug, Clone)]
struct ScanNode {
    kernel: ScanKernel,
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    /// Hidden states `[t][lane]`.
    h: Vec<f64>,
    /// Transitions `[t][lane]`.
    a_bar: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::from_parts(self.shapes[v.0].clone(), vec![0.0; self.shapes[v.0].iter().product()]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix("matmul", ta)?;
        let (k2, n) = matrix("matmul", tb)?;
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    row[j] += av * brow[j];
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x[N×C] + bias[C]` added to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c) = matrix("add_row", tx)?;
        if tb.numel() != c {
            return Err(Error::dim("add_row", tx.shape(), tb.shape()));
        }
        let bd = tb.data();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, bias), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Scalar times tensor.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Act(x, kind), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    /// Elementwise map with a caller-supplied derivative (evaluated at the
    /// input).
    pub fn map_elementwise(&mut self, x: Var, f: fn(f64) -> f64, derivative: fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, Op::Elementwise { x, derivative }, rg)
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// then `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(alloc::format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let tx = self.value(x);
        let (n, c) = matrix("layer_norm", tx)?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(Error::dim("layer_norm", tx.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / math::sqrt(var + eps);
            rstd[i] = r;
            for j in 0..c {
                let xh = (row[j] - mean) * r;
                xhat[i * c + j] = xh;
                out[i * c + j] = g.data()[j] * xh + b.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-channel 1-D cross-correlation along rows with zero padding of
    /// `(K-1)/2` on both ends; `kernel` is `K×C` with `K` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (len, c) = matrix("depthwise_conv1d", tx)?;
        let (kw, kc) = matrix("depthwise_conv1d", tk)?;
        if kc != c {
            return Err(Error::dim("depthwise_conv1d", tx.shape(), tk.shape()));
        }
        if kw % 2 == 0 {
            return Err(Error::Config(alloc::format!(
                "depthwise kernel width must be odd, got {kw}"
            )));
        }
        let pad = (kw - 1) / 2;
        let mut out = vec![0.0; len * c];
        for t in 0..len {
            for j in 0..kw {
                let src = t + j;
                if src < pad || src - pad >= len {
                    continue;
                }
                let xr = tx.row(src - pad);
                let kr = tk.row(j);
                let o = &mut out[t * c..(t + 1) * c];
                for ch in 0..c {
                    o[ch] += kr[ch] * xr[ch];
                }
            }
        }
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            Tensor::from_parts(vec![len, c], out),
            Op::DepthwiseConv { x, kernel },
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let n = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != n {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![n, total], out), Op::Concat(parts.to_vec()), rg))
    }

    /// Rows of `x` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(alloc::format!(
                "gather index {bad} out of range for {n} rows"
            )));
        }
        let out = tx.gather_rows(idx);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    fn groups(&self, name: &'static str, x: Var, k: usize) -> Result<(usize, usize)> {
        let tx = self.value(x);
        let (rows, c) = matrix(name, tx)?;
        if k == 0 || rows % k != 0 {
            return Err(Error::Contract(alloc::format!(
                "{name}: {rows} rows not divisible into groups of {k}"
            )));
        }
        Ok((rows / k, c))
    }

    /// Elementwise max over consecutive groups of `k` rows.
    pub fn group_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let (m, c) = self.groups("group_max", x, k)?;
        let tx = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; m * c];
        let mut argmax = vec![0usize; m * c];
        for g in 0..m {
            for r in 0..k {
                let row_idx = g * k + r;
                let row = tx.row(row_idx);
                for ch in 0..c {
                    if row[ch] > out[g * c + ch] {
                        out[g * c + ch] = row[ch];
                        argmax[g * c + ch] = row_idx;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, c], out), Op::GroupMax { x, argmax }, rg))
    }

    /// Sum over consecutive groups of `k` rows.
    pub fn group_sum(&mut self, x: Var, k: usize) -> Result<Var> {
        let (m, c) = self.groups("group_sum", x, k)?;
        let tx = self.value(x);
        let mut out = vec![0.0; m * c];
        for g in 0..m {
            for r in 0..k {
                let row = tx.row(g * k + r);
                for ch in 0..c {
                    out[g * c + ch] += row[ch];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, c], out), Op::GroupSum { x, k }, rg))
    }

    /// `out_i = Σ_j w_{ij} x_{idx_{ij}}` with `k` (index, weight) pairs per
    /// output row; the weights are constants.
    pub fn interpolate_rows(&mut self, x: Var, idx: &[usize], weights: &[f64], k: usize) -> Result<Var> {
        if k == 0 || idx.len() != weights.len() || !idx.len().is_multiple_of(k) {
            return Err(Error::Contract(
                "interpolate_rows: inconsistent index/weight lists".into(),
            ));
        }
        let tx = self.value(x);
        let (n, c) = matrix("interpolate_rows", tx)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(alloc::format!(
                "interpolation index {bad} out of range for {n} rows"
            )));
        }
        let m = idx.len() / k;
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            for j in 0..k {
                let w = weights[i * k + j];
                let row = tx.row(idx[i * k + j]);
                for ch in 0..c {
                    out[i * c + ch] += w * row[ch];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![m, c], out),
            Op::Interp {
                x,
                idx: idx.to_vec(),
                weights: weights.to_vec(),
                k,
            },
            rg,
        ))
    }

    /// Euclidean norm of every row, as an `N×1` column. The gradient at a
    /// zero row is taken as zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, _) = matrix("row_norm", tx)?;
        let out: Vec<f64> = (0..n)
            .map(|i| math::sqrt(tx.row(i).iter().map(|v| v * v).sum()))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, 1], out), Op::RowNorm(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `x·W + b` for a weight `W` and optional bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Selective scan with per-step ZOH discretization.
    ///
    /// `x`, `delta`: `L×D`; `a`: `D×S` (continuous, negative);
    /// `b`, `c`: `L×S`. Returns `y`: `L×D`.
    pub fn selective_scan(&mut self, kernel: ScanKernel, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (len, d) = matrix("selective_scan", self.value(x))?;
        let (da, s) = matrix("selective_scan", self.value(a))?;
        if self.value(delta).shape() != [len, d]
            || da != d
            || self.value(b).shape() != [len, s]
            || self.value(c).shape() != [len, s]
        {
            return Err(Error::dim(
                "selective_scan",
                self.value(x).shape(),
                self.value(a).shape(),
            ));
        }
        let inputs = ssm::SelectiveInputs {
            len,
            channels: d,
            state: s,
            delta: self.value(delta).data().to_vec(),
            b: self.value(b).data().to_vec(),
            c: self.value(c).data().to_vec(),
        };
        let params = ssm::ScanParams::Selective {
            a: self.value(a).data(),
            inputs: &inputs,
        };
        let terms = ssm::step_terms(&params, self.value(x).data(), len);
        let h = ssm::linear_recurrence(kernel, &terms.a_bar, &terms.bx, d * s, None);
        let y = ssm::readout(&params, &h, len);
        let rg = self.rg(&[x, delta, a, b, c]);
        Ok(self.push(
            Tensor::from_parts(vec![len, d], y),
            Op::Scan(Box::new(ScanNode {
                kernel,
                x,
                delta,
                a,
                b,
                c,
                h,
                a_bar: terms.a_bar,
            })),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if want(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    let bd = tb.data();
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if want(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    let ad = ta.data();
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                row[j] += av * gr[j];
                            }
                        }
                    }
                }
            }
            Op::AddRow(x, b) => {
                let c = numel(*b);
                if want(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if want(*b) {
                    let gb = accumulate(&mut grads[b.0], c);
                    for row in g.chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if want(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if want(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o += sign * v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bd = self.value(*b).data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if want(*b) {
                    let ad = self.value(*a).data();
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            Op::Act(x, kind) => {
                if want(*x) {
                    let xd = self.value(*x).data();
                    let yd = node.value.data();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * kind.derivative(xd[i], yd[i]);
                    }
                }
            }
            Op::Exp(x) => {
                if want(*x) {
                    let yd = node.value.data();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * yd[i];
                    }
                }
            }
            Op::Elementwise { x, derivative } => {
                if want(*x) {
                    let xd = self.value(*x).data();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * derivative(xd[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = numel(*gamma);
                let n = g.len() / c;
                if want(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], c);
                    for i in 0..n * c {
                        gg[i % c] += g[i] * xhat[i];
                    }
                }
                if want(*beta) {
                    let gb = accumulate(&mut grads[beta.0], c);
                    for i in 0..n * c {
                        gb[i % c] += g[i];
                    }
                }
                if want(*x) {
                    let gam = self.value(*gamma).data();
                    let gx = accumulate(&mut grads[x.0], n * c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, kernel } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let (len, c) = (tx.rows(), tx.cols());
                let kw = tk.rows();
                let pad = (kw - 1) / 2;
                let wx = want(*x);
                let wk = want(*kernel);
                let mut gx = if wx { vec![0.0; len * c] } else { Vec::new() };
                let mut gk = if wk { vec![0.0; kw * c] } else { Vec::new() };
                for t in 0..len {
                    for j in 0..kw {
                        let src = t + j;
                        if src < pad || src - pad >= len {
                            continue;
                        }
                        let s = src - pad;
                        for ch in 0..c {
                            let gv = g[t * c + ch];
                            if wx {
                                gx[s * c + ch] += gv * tk.data()[j * c + ch];
                            }
                            if wk {
                                gk[j * c + ch] += gv * tx.data()[s * c + ch];
                            }
                        }
                    }
                }
                if wx {
                    let dst = accumulate(&mut grads[x.0], len * c);
                    for (o, v) in dst.iter_mut().zip(&gx) {
                        *o += v;
                    }
                }
                if wk {
                    let dst = accumulate(&mut grads[kernel.0], kw * c);
                    for (o, v) in dst.iter_mut().zip(&gk) {
                        *o += v;
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let n = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if want(p) {
                        let gp = accumulate(&mut grads[p.0], n * w);
                        for i in 0..n {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { x, idx } => {
                if want(*x) {
                    let c = self.value(*x).cols();
                    let gx = accumulate(&mut grads[x.0], numel(*x));
                    for (r, &src) in idx.iter().enumerate() {
                        for ch in 0..c {
                            gx[src * c + ch] += g[r * c + ch];
                        }
                    }
                }
            }
            Op::GroupMax { x, argmax } => {
                if want(*x) {
                    let c = node.value.cols();
                    let gx = accumulate(&mut grads[x.0], numel(*x));
                    for (i, &src_row) in argmax.iter().enumerate() {
                        gx[src_row * c + i % c] += g[i];
                    }
                }
            }
            Op::GroupSum { x, k } => {
                if want(*x) {
                    let c = node.value.cols();
                    let gx = accumulate(&mut grads[x.0], numel(*x));
                    for (r, row) in gx.chunks_mut(c).enumerate() {
                        let grp = r / k;
                        for ch in 0..c {
                            row[ch] += g[grp * c + ch];
                        }
                    }
                }
            }
            Op::Interp { x, idx, weights, k } => {
                if want(*x) {
                    let c = node.value.cols();
                    let gx = accumulate(&mut grads[x.0], numel(*x));
                    for (e, (&src, &w)) in idx.iter().zip(weights).enumerate() {
                        let out_row = e / k;
                        for ch in 0..c {
                            gx[src * c + ch] += w * g[out_row * c + ch];
                        }
                    }
                }
            }
            Op::RowNorm(x) => {
                if want(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let norms = node.value.data();
                    let gx = accumulate(&mut grads[x.0], tx.numel());
                    for i in 0..norms.len() {
                        if norms[i] > 0.0 {
                            let s = g[i] / norms[i];
                            for ch in 0..c {
                                gx[i * c + ch] += s * tx.data()[i * c + ch];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    let gx = accumulate(&mut grads[x.0], numel(*x));
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if want(*x) {
                    let n = numel(*x);
                    let gx = accumulate(&mut grads[x.0], n);
                    for o in gx.iter_mut() {
                        *o += g[0] / n as f64;
                    }
                }
            }
            Op::Scan(node_data) => self.scan_backward(node_data, g, grads),
        }
    }

    fn scan_backward(&self, sn: &ScanNode, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tx = self.value(sn.x);
        let (len, d) = (tx.rows(), tx.cols());
        let ta = self.value(sn.a);
        let s = ta.cols();
        let lanes = d * s;
        let xd = tx.data();
        let delta = self.value(sn.delta).data();
        let a = ta.data();
        let bd = self.value(sn.b).data();
        let cd = self.value(sn.c).data();

        // Adjoint of the hidden state, a linear recurrence run backwards:
        // λ_t = C_t g_t + ā_{t+1} λ_{t+1}.
        let mut rev_a = vec![0.0; len * lanes];
        let mut rev_q = vec![0.0; len * lanes];
        for tau in 0..len {
            let t = len - 1 - tau;
            for ch in 0..d {
                let gv = g[t * d + ch];
                for st in 0..s {
                    let lane = ch * s + st;
                    rev_q[tau * lanes + lane] = gv * cd[t * s + st];
                    if t + 1 < len {
                        rev_a[tau * lanes + lane] = sn.a_bar[(t + 1) * lanes + lane];
                    }
                }
            }
        }
        let rev_lambda = ssm::linear_recurrence(sn.kernel, &rev_a, &rev_q, lanes, None);

        let mut gx = vec![0.0; len * d];
        let mut gdelta = vec![0.0; len * d];
        let mut ga = vec![0.0; lanes];
        let mut gb = vec![0.0; len * s];
        let mut gc = vec![0.0; len * s];
        for t in 0..len {
            let lam = &rev_lambda[(len - 1 - t) * lanes..(len - t) * lanes];
            for ch in 0..d {
                let dt = delta[t * d + ch];
                let xv = xd[t * d + ch];
                let gv = g[t * d + ch];
                for st in 0..s {
                    let lane = ch * s + st;
                    let idx = t * lanes + lane;
                    let h = sn.h[idx];
                    let h_prev = if t > 0 { sn.h[idx - lanes] } else { 0.0 };
                    let av = a[lane];
                    let abar = sn.a_bar[idx];
                    let bv = bd[t * s + st];
                    let (phi, phi_dt, phi_a) = ssm::zoh_gain_with_partials(av, dt, abar);
                    let l = lam[lane];

                    gc[t * s + st] += gv * h;
                    let d_abar = l * h_prev;
                    let d_phi = l * bv * xv;
                    gx[t * d + ch] += l * phi * bv;
                    gb[t * s + st] += l * phi * xv;
                    gdelta[t * d + ch] += d_abar * av * abar + d_phi * phi_dt;
                    ga[lane] += d_abar * dt * abar + d_phi * phi_a;
                }
            }
        }
        let targets = [(sn.x, gx), (sn.delta, gdelta), (sn.a, ga), (sn.b, gb), (sn.c, gc)];
        for (v, gv) in targets {
            if self.nodes[v.0].requires_grad {
                let dst = accumulate(&mut grads[v.0], gv.len());
                for (o, x) in dst.iter_mut().zip(&gv) {
                    *o += x;
                }
            }
        }
    }

    /// Human-readable op name of a node, for diagnostics.
    pub fn op_name(&self, v: Var) -> String {
        let s = match &self.nodes[v.0].op {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Act(..) => "activation",
            Op::Exp(..) => "exp",
            Op::Elementwise { .. } => "elementwise",
            Op::LayerNorm { .. } => "layer_norm",
            Op::DepthwiseConv { .. } => "depthwise_conv1d",
            Op::Concat(..) => "concat_cols",
            Op::Gather { .. } => "gather_rows",
            Op::GroupMax { .. } => "group_max",
            Op::GroupSum { .. } => "group_sum",
            Op::Interp { .. } => "interpolate_rows",
            Op::RowNorm(..) => "row_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Scan(..) => "selective_scan",
        };
        s.into()
    }
}
