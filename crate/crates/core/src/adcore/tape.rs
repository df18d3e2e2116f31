//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive in the order it is applied, so a
//! node's parents always precede it. [`Tape::backward`] walks the nodes once
//! in reverse order, accumulating cotangents. Nodes that do not depend on a
//! differentiable leaf are skipped entirely.
//!
//! ```
//! use stein_core::adcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! let s = tape.sum(y);
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use serde::{Deserialize, Serialize};

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Identity => v,
        }
    }

    /// Derivative given pre-activation `x` and output `y`. ReLU uses 0 at 0.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            _ => return None,
        })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Sum(Var),
    RowSum(Var),
    MaxConst(Var, f64),
    CrossEntropy(Var, Vec<usize>),
    ConcatCols(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Cotangents produced by a backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
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

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input. Stored in matrix view.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = value.as_matrix();
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = value.as_matrix();
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        let out = matmul(va, vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() || va.cols() != vb.cols() {
            return Err(Error::dim(format!(
                "{what}: {}x{} vs {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), out, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::dim(format!(
                "add_row: {}x{} plus {}x{}",
                va.rows(),
                va.cols(),
                vr.rows(),
                vr.cols()
            )));
        }
        let c = va.cols();
        let mut out = va.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vr.data()[i % c];
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Op::AddRow(a, row), out, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), out, ng)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let out = self.value(a).map(|v| act.apply(v));
        let ng = self.needs(a);
        self.push(Op::Act(a, act), out, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let ng = self.needs(a);
        self.push(Op::Square(a), out, ng)
    }

    /// Elementwise square root. The backward pass sends no gradient through
    /// entries whose output is exactly zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0).sqrt());
        let ng = self.needs(a);
        self.push(Op::Sqrt(a), out, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(Op::Exp(a), out, ng)
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor::raw_matrix(1, 1, vec![s]), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `r×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out: Vec<f64> = va.iter_rows().map(|r| r.iter().sum()).collect();
        let r = va.rows();
        let ng = self.needs(a);
        self.push(Op::RowSum(a), Tensor::raw_matrix(r, 1, out), ng)
    }

    /// Elementwise `max(a, floor)`; gradient flows only where `a > floor`.
    pub fn max_const(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor));
        let ng = self.needs(a);
        self.push(Op::MaxConst(a, floor), out, ng)
    }

    /// Softmax cross-entropy of each row of `logits` against its label, `r×1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rows() != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: {} rows, {} labels",
                vl.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= vl.cols()) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                vl.cols()
            )));
        }
        let out: Vec<f64> = vl
            .iter_rows()
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row) - row[y])
            .collect();
        let r = vl.rows();
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy(logits, labels.to_vec()),
            Tensor::raw_matrix(r, 1, out),
            ng,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::dim(format!(
                "concat_cols: {} rows vs {} rows",
                va.rows(),
                vb.rows()
            )));
        }
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(va.row(i));
            out.extend_from_slice(vb.row(i));
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols(a, b), Tensor::raw_matrix(r, ca + cb, out), ng))
    }

    /// Gradient of a scalar output with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        self.backward_with(out, &Tensor::raw_matrix(1, 1, vec![1.0]))
    }

    /// Vector-Jacobian product: seeds `out` with `cotangent`.
    pub fn backward_with(&self, out: Var, cotangent: &Tensor) -> Result<Gradients> {
        let vo = self.value(out);
        if vo.len() != cotangent.len()
            || (cotangent.rank() == 2 && (cotangent.rows() != vo.rows()))
        {
            return Err(Error::dim(format!(
                "cotangent shape {:?} does not match output {:?}",
                cotangent.shape(),
                vo.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::raw_matrix(vo.rows(), vo.cols(), cotangent.data().to_vec()));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes[..=out.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |v: Var, contrib: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    send(*a, matmul_nt(g, self.value(*b)), grads);
                }
                if self.needs(*b) {
                    send(*b, matmul_tn(self.value(*a), g), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y), grads);
                }
                if self.needs(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y), grads);
                }
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone(), grads);
                if self.needs(*row) {
                    let c = g.cols();
                    let mut acc = vec![0.0; c];
                    for r in g.iter_rows() {
                        for (s, v) in acc.iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    send(*row, Tensor::raw_matrix(1, c, acc), grads);
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|v| v * s), grads),
            Op::AddScalar(a) => send(*a, g.clone(), grads),
            Op::Act(a, act) => {
                let x = self.value(*a);
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(node.value.data()))
                    .map(|(&gv, (&xv, &yv))| gv * act.derivative(xv, yv))
                    .collect();
                send(*a, Tensor::raw(g.shape().to_vec(), d), grads);
            }
            Op::Square(a) => send(*a, g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv), grads),
            Op::Sqrt(a) => send(
                *a,
                g.zip_map(&node.value, |gv, y| if y > 0.0 { 0.5 * gv / y } else { 0.0 }),
                grads,
            ),
            Op::Exp(a) => send(*a, g.zip_map(&node.value, |gv, y| gv * y), grads),
            Op::Sum(a) => {
                let va = self.value(*a);
                send(*a, Tensor::filled(&[va.rows(), va.cols()], g.item()), grads);
            }
            Op::RowSum(a) => {
                let va = self.value(*a);
                let (r, c) = (va.rows(), va.cols());
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    d.extend(std::iter::repeat_n(g.data()[i], c));
                }
                send(*a, Tensor::raw_matrix(r, c, d), grads);
            }
            Op::MaxConst(a, floor) => send(
                *a,
                g.zip_map(self.value(*a), |gv, x| if x > *floor { gv } else { 0.0 }),
                grads,
            ),
            Op::CrossEntropy(a, labels) => {
                let vl = self.value(*a);
                let (r, c) = (vl.rows(), vl.cols());
                let mut d = Vec::with_capacity(r * c);
                for (i, row) in vl.iter_rows().enumerate() {
                    let lse = log_sum_exp(row);
                    let gi = g.data()[i];
                    for (k, &l) in row.iter().enumerate() {
                        let p = (l - lse).exp();
                        let onehot = if k == labels[i] { 1.0 } else { 0.0 };
                        d.push(gi * (p - onehot));
                    }
                }
                send(*a, Tensor::raw_matrix(r, c, d), grads);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let r = g.rows();
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for row in g.iter_rows() {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                send(*a, Tensor::raw_matrix(r, ca, ga), grads);
                send(*b, Tensor::raw_matrix(r, cb, gb), grads);
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_check<F>(x0: &[f64], f: F) -> (Vec<f64>, Vec<f64>)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(x0.to_vec()).unwrap());
        let y = f(&mut tape, x);
        let s = tape.sum(y);
        let ad = tape.backward(s).unwrap().wrt(x).into_data();

        let eval = |p: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::vector(p.to_vec()).unwrap());
            let y = f(&mut t, x);
            let s = t.sum(y);
            t.value(s).item()
        };
        let h = 1e-5;
        let fd = (0..x0.len())
            .map(|i| {
                let mut p = x0.to_vec();
                p[i] += h;
                let up = eval(&p);
                p[i] -= 2.0 * h;
                (up - eval(&p)) / (2.0 * h)
            })
            .collect();
        (ad, fd)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8);
        num / den
    }

    #[test]
    fn square_of_three() {
        let (ad, _) = fd_check(&[3.0], |t, x| t.square(x));
        assert_eq!(ad, vec![6.0]);
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let (ad, _) = fd_check(&[0.0, 1.0, -1.0], |t, x| t.activation(x, Activation::Relu));
        assert_eq!(ad, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_const_blocks_gradient_below_floor() {
        let (ad, _) = fd_check(&[0.1, 0.5], |t, x| t.max_const(x, 0.2));
        assert_eq!(ad, vec![0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let x0 = [0.3, -1.2, 0.8, 2.0, 0.1, -0.4];
        let (ad, fd) = fd_check(&x0, |t, x| t.cross_entropy(x, &[4]).unwrap());
        assert!(rel_err(&ad, &fd) < 1e-8, "{ad:?} vs {fd:?}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 1.0]).unwrap());
        assert!(matches!(t.cross_entropy(x, &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0]).unwrap());
        let y = t.tanh(x);
        let g = t.backward_with(y, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn primitives_match_finite_differences(
            x0 in proptest::collection::vec(-3.0f64..3.0, 4),
            w0 in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            let w = w0.clone();
            let (ad, fd) = fd_check(&x0, move |t, x| {
                let wm = t.constant(Tensor::matrix(4, 2, w.clone()).unwrap());
                let h = t.matmul(x, wm).unwrap();
                let a = t.tanh(h);
                let s = t.activation(h, Activation::Sigmoid);
                let m = t.mul(a, s).unwrap();
                let sq = t.square(m);
                let e = t.exp(sq);
                let shifted = t.add_scalar(e, 1.0);
                let r = t.sqrt(shifted);
                let both = t.concat_cols(r, a).unwrap();
                t.row_sum(both)
            });
            prop_assert!(rel_err(&ad, &fd) < 1e-6, "{:?} vs {:?}", ad, fd);
        }

        #[test]
        fn gradient_is_linear(
            x0 in proptest::collection::vec(-3.0f64..3.0, 3),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let grad_of = |f: &dyn Fn(&mut Tape, Var) -> Var| {
                let mut t = Tape::new();
                let x = t.leaf(Tensor::vector(x0.clone()).unwrap());
                let y = f(&mut t, x);
                let s = t.sum(y);
                t.backward(s).unwrap().wrt(x).into_data()
            };
            let f = |t: &mut Tape, x: Var| t.tanh(x);
            let g = |t: &mut Tape, x: Var| t.square(x);
            let combo = |t: &mut Tape, x: Var| {
                let fx = t.tanh(x);
                let gx = t.square(x);
                let af = t.scale(fx, a);
                let bg = t.scale(gx, b);
                t.add(af, bg).unwrap()
            };
            let gf = grad_of(&f);
            let gg = grad_of(&g);
            let gc = grad_of(&combo);
            for i in 0..3 {
                prop_assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
            }
        }
    }
}
