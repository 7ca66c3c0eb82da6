//! Wengert-tape reverse-mode differentiation over [`Tensor`].
//!
//! Ops are recorded in creation order, which is already a topological order,
//! so the backward pass is a single reverse sweep. The tape is consumed by
//! [`Tape::backward`], which returns the gradients; first-order only.
//!
//! Supported ops: add / sub / mul (elementwise, with rank-0 scalar
//! broadcast), scale by constant, matmul, tanh, relu, sum, mean, elementwise
//! squared error and concatenation along the last axis. Every op validates
//! shapes up front and finiteness of its output.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    SqErr(usize, usize),
    Concat {
        parts: Vec<usize>,
        widths: Vec<usize>,
        rows: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when no gradient flowed.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

// a[m,k] @ b[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

// a[m,k] @ b[n,k]^T -> [m,n]
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

// a[k,m]^T @ b[k,n] -> [m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Register a tensor that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Register a tensor that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> CoreResult<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        // Equal shapes, or one side is a one-element scalar broadcast.
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data().iter())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(CoreError::Shape {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        let shape = if ta.is_scalar() && !tb.is_scalar() {
            tb.shape().to_vec()
        } else {
            ta.shape().to_vec()
        };
        let value = Tensor::new(shape, data).map_err(|e| match e {
            CoreError::Numeric { .. } => CoreError::Numeric { op: name },
            other => other,
        })?;
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(value, op(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> CoreResult<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> CoreResult<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> CoreResult<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise squared error `(a - b)^2`; equal shapes only.
    pub fn sq_err(&mut self, a: Var, b: Var) -> CoreResult<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(CoreError::Shape {
                op: "sq_err",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(value, Op::SqErr(a.0, b.0), rg))
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, a: Var, k: f64) -> CoreResult<Var> {
        let ta = &self.nodes[a.0].value;
        let value = ta.scale(k).map_err(|_| CoreError::Numeric { op: "scale" })?;
        let rg = self.requires(a.0);
        Ok(self.push(value, Op::Scale(a.0, k), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> CoreResult<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)
            .map_err(|_| CoreError::Numeric { op: "matmul" })?;
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(value, Op::Matmul { a: a.0, b: b.0, m, k, n }, rg))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> CoreResult<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)
            .map_err(|_| CoreError::Numeric { op: name })?;
        let rg = self.requires(a.0);
        Ok(self.push(value, op(a.0), rg))
    }

    pub fn tanh(&mut self, a: Var) -> CoreResult<Var> {
        self.unary("tanh", a, libm::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> CoreResult<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    fn reduce(
        &mut self,
        name: &'static str,
        a: Var,
        scale: impl FnOnce(usize) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> CoreResult<Var> {
        let ta = &self.nodes[a.0].value;
        let n = ta.len();
        if n == 0 {
            return Err(CoreError::Contract(format!("{name} of empty tensor")));
        }
        let s: f64 = ta.data().iter().sum::<f64>() * scale(n);
        let value = Tensor::new(vec![], vec![s]).map_err(|_| CoreError::Numeric { op: name })?;
        let rg = self.requires(a.0);
        Ok(self.push(value, op(a.0), rg))
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> CoreResult<Var> {
        self.reduce("sum", a, |_| 1.0, Op::Sum)
    }

    /// Full mean reduction to a rank-0 scalar.
    pub fn mean(&mut self, a: Var) -> CoreResult<Var> {
        self.reduce("mean", a, |n| 1.0 / n as f64, Op::Mean)
    }

    /// Mean squared error between two equal-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> CoreResult<Var> {
        let e = self.sq_err(a, b)?;
        self.mean(e)
    }

    /// Concatenate along the last axis. All parts rank-1, or all rank-2 with
    /// equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> CoreResult<Var> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat of zero tensors".into()));
        }
        let rank = self.nodes[parts[0].0].value.shape().len();
        let rows = match rank {
            1 => 1,
            2 => self.nodes[parts[0].0].value.shape()[0],
            _ => {
                return Err(CoreError::Contract(
                    "concat supports rank-1 and rank-2 tensors".into(),
                ))
            }
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let ok = s.len() == rank && (rank == 1 || s[0] == rows);
            if !ok {
                return Err(CoreError::Shape {
                    op: "concat",
                    left: self.nodes[parts[0].0].value.shape().to_vec(),
                    right: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(widths.iter()) {
                let d = self.nodes[p.0].value.data();
                data.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|p| self.requires(p.0));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                widths,
                rows,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; returns the
    /// gradient of the loss w.r.t. every node that gradients flowed to.
    pub fn backward(self, loss: Var) -> CoreResult<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        // Creation order is topological; sweep in reverse.
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, add: impl Fn(usize) -> f64, n: usize) {
        let slot = grads[idx].get_or_insert_with(|| vec![0.0; n]);
        for (j, s) in slot.iter_mut().enumerate() {
            *s += add(j);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_broadcast(grads, *a, g, |_, gj| gj);
                self.accum_broadcast(grads, *b, g, |_, gj| gj);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(grads, *a, g, |_, gj| gj);
                self.accum_broadcast(grads, *b, g, |_, gj| -gj);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let bv = move |j: usize| if db.len() == 1 { db[0] } else { db[j] };
                let av = move |j: usize| if da.len() == 1 { da[0] } else { da[j] };
                self.accum_broadcast(grads, *a, g, move |j, gj| gj * bv(j));
                self.accum_broadcast(grads, *b, g, move |j, gj| gj * av(j));
            }
            Op::SqErr(a, b) => {
                let (da, db) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.requires(*a) {
                    Self::accumulate(grads, *a, |j| 2.0 * (da[j] - db[j]) * g[j], da.len());
                }
                if self.requires(*b) {
                    Self::accumulate(grads, *b, |j| -2.0 * (da[j] - db[j]) * g[j], db.len());
                }
            }
            Op::Scale(a, k) => {
                if self.requires(*a) {
                    let k = *k;
                    Self::accumulate(grads, *a, |j| g[j] * k, g.len());
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires(*a) {
                    let db = matmul_nt(g, self.nodes[*b].value.data(), m, n, k);
                    Self::accumulate(grads, *a, |j| db[j], m * k);
                }
                if self.requires(*b) {
                    let da = matmul_tn(self.nodes[*a].value.data(), g, k, m, n);
                    Self::accumulate(grads, *b, |j| da[j], k * n);
                }
            }
            Op::Tanh(a) => {
                if self.requires(*a) {
                    let y = node.value.data();
                    Self::accumulate(grads, *a, |j| g[j] * (1.0 - y[j] * y[j]), y.len());
                }
            }
            Op::Relu(a) => {
                if self.requires(*a) {
                    let x = self.nodes[*a].value.data();
                    Self::accumulate(
                        grads,
                        *a,
                        |j| if x[j] > 0.0 { g[j] } else { 0.0 },
                        x.len(),
                    );
                }
            }
            Op::Sum(a) => {
                if self.requires(*a) {
                    let n = self.nodes[*a].value.len();
                    Self::accumulate(grads, *a, |_| g[0], n);
                }
            }
            Op::Mean(a) => {
                if self.requires(*a) {
                    let n = self.nodes[*a].value.len();
                    let inv = 1.0 / n as f64;
                    Self::accumulate(grads, *a, |_| g[0] * inv, n);
                }
            }
            Op::Concat { parts, widths, rows } => {
                let mut offset = 0;
                let total: usize = widths.iter().sum();
                for (p, &w) in parts.iter().zip(widths.iter()) {
                    if self.requires(*p) {
                        let off = offset;
                        Self::accumulate(
                            grads,
                            *p,
                            |j| {
                                let (r, c) = (j / w, j % w);
                                g[r * total + off + c]
                            },
                            rows * w,
                        );
                    }
                    offset += w;
                }
            }
        }
    }

    // Accumulate into operand `idx` of an elementwise op whose output grad is
    // `g`; handles the scalar-broadcast case by summing.
    fn accum_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        idx: usize,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.requires(idx) {
            return;
        }
        let n = self.nodes[idx].value.len();
        if n == g.len() {
            Self::accumulate(grads, idx, |j| f(j, g[j]), n);
        } else {
            // operand was the broadcast scalar: its grad is the sum of
            // per-element contributions
            debug_assert_eq!(n, 1);
            let total: f64 = g.iter().enumerate().map(|(j, &gj)| f(j, gj)).sum();
            Self::accumulate(grads, idx, |_| total, 1);
        }
    }
}
