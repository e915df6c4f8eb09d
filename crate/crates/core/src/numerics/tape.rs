//! Reverse-mode accumulation over a per-step recording.
//!
//! A [`Tape`] is built while evaluating a scalar pipeline and thrown away
//! afterwards. Each recorded node keeps its value, its parents, and a
//! [`Backward`] rule that maps the upstream gradient to one gradient per
//! parent. Domain operations (convolution, attention, COM field, ...) define
//! their own rules next to their forward code.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{ensure_same_shape, elementwise, reduce, ElementwiseOp, ReduceOp, Reduction};
use super::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub trait Backward {
    /// Gradients with respect to each parent, in parent order.
    fn backward(&self, parents: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), rule: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn record(&mut self, value: Tensor, parents: &[Var], rule: impl Backward + 'static) -> Var {
        self.nodes.push(Node { value, parents: parents.to_vec(), rule: Some(Box::new(rule)) });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar, got {:?}", out.shape())));
        }
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", out.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.rule {
                let parents: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let pg = rule.backward(&parents, &node.value, &g);
                debug_assert_eq!(pg.len(), node.parents.len());
                for (p, gp) in node.parents.iter().zip(pg) {
                    debug_assert_eq!(gp.shape(), self.nodes[p.0].value.shape());
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&gp),
                        slot @ None => *slot = Some(gp),
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let value = elementwise(op, self.value(a), b.map(|b| self.value(b)))?;
        let parents: Vec<Var> = core::iter::once(a).chain(b).collect();
        Ok(self.record(value, &parents, ElementwiseRule(op)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Abs, a, None)
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize]) -> Result<Var> {
        let value = reduce(op, self.value(a), axes)?;
        let in_shape = self.value(a).shape().to_vec();
        Ok(self.record(value, &[a], ReduceRule { op, in_shape, axes: axes.to_vec() }))
    }

    /// Sum over every axis.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceOp::Sum, a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceOp::Mean, a, &axes)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.record(value, &[a], ScaleRule(factor))
    }

    /// `a + factor · b`, used to combine loss terms.
    pub fn axpy(&mut self, a: Var, factor: f64, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + factor * y)?;
        Ok(self.record(value, &[a, b], AxpyRule(factor)))
    }
}

struct ElementwiseRule(ElementwiseOp);

impl Backward for ElementwiseRule {
    fn backward(&self, p: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
        use ElementwiseOp::*;
        let a = p[0];
        let gd = g.data();
        let ad = a.data();
        let unary = |f: &dyn Fn(usize) -> f64| Tensor::from_fn(a.shape(), |i| gd[i] * f(i));
        match self.0 {
            Add => vec![g.clone(), g.clone()],
            Sub => vec![g.clone(), g.map(|v| -v)],
            Mul => {
                let bd = p[1].data();
                vec![unary(&|i| bd[i]), unary(&|i| ad[i])]
            }
            Div => {
                let bd = p[1].data();
                vec![unary(&|i| 1.0 / bd[i]), unary(&|i| -ad[i] / (bd[i] * bd[i]))]
            }
            Max => {
                let bd = p[1].data();
                vec![
                    unary(&|i| if ad[i] >= bd[i] { 1.0 } else { 0.0 }),
                    unary(&|i| if ad[i] >= bd[i] { 0.0 } else { 1.0 }),
                ]
            }
            Exp => {
                let od = out.data();
                vec![unary(&|i| od[i])]
            }
            Log => vec![unary(&|i| 1.0 / ad[i])],
            Clip { lo, hi } => vec![unary(&|i| if ad[i] > lo && ad[i] < hi { 1.0 } else { 0.0 })],
            Relu => vec![unary(&|i| if ad[i] > 0.0 { 1.0 } else { 0.0 })],
            Abs => vec![unary(&|i| {
                if ad[i] > 0.0 {
                    1.0
                } else if ad[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })],
        }
    }
}

struct ReduceRule {
    op: ReduceOp,
    in_shape: Vec<usize>,
    axes: Vec<usize>,
}

impl Backward for ReduceRule {
    fn backward(&self, p: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let red = Reduction::new(&self.in_shape, &self.axes).expect("validated in forward");
        let map = red.index_map();
        let a = p[0].data();
        let od = out.data();
        let gd = g.data();
        let mut grad = vec![0.0; a.len()];
        match self.op {
            ReduceOp::Sum => {
                for (gi, &o) in grad.iter_mut().zip(&map) {
                    *gi = gd[o];
                }
            }
            ReduceOp::Mean => {
                let inv = 1.0 / red.count as f64;
                for (gi, &o) in grad.iter_mut().zip(&map) {
                    *gi = gd[o] * inv;
                }
            }
            ReduceOp::L2Norm => {
                for (i, &o) in map.iter().enumerate() {
                    if od[o] > 0.0 {
                        grad[i] = gd[o] * a[i] / od[o];
                    }
                }
            }
            ReduceOp::Max | ReduceOp::LinfNorm => {
                // Route to the first maximizing entry.
                let mut taken = vec![false; od.len()];
                for (i, &o) in map.iter().enumerate() {
                    let v = if self.op == ReduceOp::Max { a[i] } else { a[i].abs() };
                    if !taken[o] && v == od[o] {
                        taken[o] = true;
                        let sign = if self.op == ReduceOp::LinfNorm && a[i] < 0.0 { -1.0 } else { 1.0 };
                        grad[i] = gd[o] * sign;
                    }
                }
            }
        }
        vec![Tensor::new(&self.in_shape, grad).expect("shape")]
    }
}

struct ScaleRule(f64);

impl Backward for ScaleRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Tensor> {
        vec![g.map(|v| v * self.0)]
    }
}

struct AxpyRule(f64);

impl Backward for AxpyRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Tensor> {
        vec![g.clone(), g.map(|v| v * self.0)]
    }
}

/// Mean squared difference, recorded as one node.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    ensure_same_shape(tape.value(a), tape.value(b))?;
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// `Σ x²` helper used by tests and examples.
pub fn sum_of_squares(tape: &mut Tape, a: Var) -> Result<Var> {
    let sq = tape.mul(a, a)?;
    tape.sum_all(sq)
}

/// SiLU activation `x·σ(x)`.
pub fn silu(tape: &mut Tape, a: Var) -> Var {
    let value = tape.value(a).map(|x| x * math::sigmoid(x));
    tape.record(value, &[a], SiluRule)
}

struct SiluRule;

impl Backward for SiluRule {
    fn backward(&self, p: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let a = p[0].data();
        let gd = g.data();
        vec![Tensor::from_fn(p[0].shape(), |i| {
            let s = math::sigmoid(a[i]);
            gd[i] * (s + a[i] * s * (1.0 - s))
        })]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(alloc::vec![1.0, 2.0]));
        let y = sum_of_squares(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).item(), 5.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = (x·x) + x  → f' = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let f = tape.add(sq, x).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x).item(), 7.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.leaf(Tensor::from_vec(alloc::vec![1.0, 1.0]));
        let f = tape.scale(x, 2.0);
        let g = tape.backward(f).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(alloc::vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }
}
