//! Minimal tape-based reverse-mode differentiation over `f64` scalars.
//!
//! Loss code is written once against the [`Scalar`] trait. Evaluating it with
//! `f64` gives plain values; evaluating it with [`Var`] records every
//! operation on a [`Tape`] so a single backward sweep yields the gradient with
//! respect to every leaf.
//!
//! Linear layers are recorded as one n-ary node via [`Scalar::dot`], which
//! keeps tapes small for the feature-based policy.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic needed by the policy forward passes and the loss kernels.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant of the same kind (a fresh leaf for tape variables).
    fn constant_like(&self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    /// `ln(1 + e^x)`, stable for large `|x|`.
    fn softplus(self) -> Self;
    fn square(self) -> Self {
        self * self
    }
    /// `Σ_i weights[i] * inputs[i]`; `weights` must be nonempty.
    fn dot(weights: &[Self], inputs: &[f64]) -> Self;
    /// Sum of a nonempty slice.
    fn sum(xs: &[Self]) -> Self {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = acc + x;
        }
        acc
    }
}

pub(crate) fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn constant_like(&self, c: f64) -> Self {
        c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    fn dot(weights: &[Self], inputs: &[f64]) -> Self {
        debug_assert_eq!(weights.len(), inputs.len());
        weights.iter().zip(inputs).map(|(w, x)| w * x).sum()
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
}

#[derive(Default)]
struct TapeInner {
    values: Vec<f64>,
    ops: Vec<&'static str>,
    /// Edge range of each node inside `edges`.
    spans: Vec<(usize, usize)>,
    /// (parent index, local partial derivative)
    edges: Vec<(usize, f64)>,
}

/// Records operations for a single backward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf node holding `value`.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, "leaf", std::iter::empty())
    }

    fn push(
        &self,
        value: f64,
        op: &'static str,
        parents: impl IntoIterator<Item = (usize, f64)>,
    ) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let start = inner.edges.len();
        inner.edges.extend(parents);
        let end = inner.edges.len();
        let index = inner.values.len();
        inner.values.push(value);
        inner.ops.push(op);
        inner.spans.push((start, end));
        Var {
            tape: self,
            index,
            value,
        }
    }

    /// Name of the first recorded operation that produced a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let inner = self.inner.borrow();
        inner
            .values
            .iter()
            .zip(&inner.ops)
            .find(|(v, _)| !v.is_finite())
            .map(|(_, op)| *op)
    }

    /// Adjoints of every node with respect to `output`.
    pub fn backward(&self, output: Var<'_>) -> Vec<f64> {
        let inner = self.inner.borrow();
        let mut adjoint = vec![0.0; inner.values.len()];
        adjoint[output.index] = 1.0;
        for node in (0..=output.index).rev() {
            let a = adjoint[node];
            if a == 0.0 {
                continue;
            }
            let (start, end) = inner.spans[node];
            for &(parent, partial) in &inner.edges[start..end] {
                adjoint[parent] += a * partial;
            }
        }
        adjoint
    }
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {})", self.index, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.index
    }

    fn unary(self, value: f64, op: &'static str, partial: f64) -> Self {
        self.tape.push(value, op, [(self.index, partial)])
    }

    fn binary(self, other: Self, value: f64, op: &'static str, da: f64, db: f64) -> Self {
        self.tape
            .push(value, op, [(self.index, da), (other.index, db)])
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, "add", 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, "sub", 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, "mul", rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, q, "div", 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(-self.value, "neg", -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.value + rhs, "add", 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.value - rhs, "sub", 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.value * rhs, "mul", rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.value / rhs, "div", 1.0 / rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(&self) -> f64 {
        self.value
    }
    fn constant_like(&self, c: f64) -> Self {
        self.tape.var(c)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, "exp", e)
    }
    fn ln(self) -> Self {
        self.unary(self.value.ln(), "ln", 1.0 / self.value)
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, "tanh", 1.0 - t * t)
    }
    fn softplus(self) -> Self {
        self.unary(softplus_f64(self.value), "softplus", sigmoid_f64(self.value))
    }
    fn square(self) -> Self {
        self.unary(self.value * self.value, "square", 2.0 * self.value)
    }
    fn dot(weights: &[Self], inputs: &[f64]) -> Self {
        debug_assert_eq!(weights.len(), inputs.len());
        let tape = weights[0].tape;
        let value = weights.iter().zip(inputs).map(|(w, x)| w.value * x).sum();
        tape.push(
            value,
            "dot",
            weights.iter().zip(inputs).map(|(w, &x)| (w.index, x)),
        )
    }
    fn sum(xs: &[Self]) -> Self {
        let tape = xs[0].tape;
        let value = xs.iter().map(|x| x.value).sum();
        tape.push(value, "sum", xs.iter().map(|x| (x.index, 1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of<F>(point: &[f64], f: F) -> (f64, Vec<f64>)
    where
        F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
    {
        let tape = Tape::new();
        let leaves: Vec<_> = point.iter().map(|&p| tape.var(p)).collect();
        let out = f(&leaves);
        let adj = tape.backward(out);
        (out.value(), leaves.iter().map(|l| adj[l.index()]).collect())
    }

    #[test]
    fn product_rule() {
        let (v, g) = grad_of(&[3.0, 4.0], |x| x[0] * x[1] + x[0]);
        assert_eq!(v, 15.0);
        assert_eq!(g, vec![5.0, 3.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let (_, g) = grad_of(&[2.0], |x| {
            let y = x[0].square();
            y * y
        });
        assert!((g[0] - 32.0).abs() < 1e-12);
    }

    #[test]
    fn transcendental_partials() {
        let (_, g) = grad_of(&[0.3], |x| x[0].tanh() + x[0].exp().ln() + x[0].softplus());
        let t = 0.3f64.tanh();
        let expect = (1.0 - t * t) + 1.0 + sigmoid_f64(0.3);
        assert!((g[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn dot_matches_scalar_path() {
        let inputs = [0.5, -2.0, 4.0];
        let (v, g) = grad_of(&[1.0, 2.0, 3.0], |w| Var::dot(w, &inputs));
        assert_eq!(v, 0.5 - 4.0 + 12.0);
        assert_eq!(g, inputs.to_vec());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus_f64(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus_f64(-800.0) >= 0.0);
        assert!((softplus_f64(10.0) - 10.000045398899218).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_reported_with_op() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let _ = x.ln();
        assert_eq!(tape.first_non_finite(), Some("ln"));
    }
}
