use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Dense row-major array of `f64` values (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// A dense `H × W × C` grid. Every per-pixel quantity in the crate uses this
/// layout; scalar maps use `C = 1` or a rank-2 `H × W` tensor.
pub type FeatureMap = Tensor;

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Flat offset of a coordinate tuple.
    pub fn offset(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.shape.len());
        coords.iter().zip(&self.shape).fold(0, |acc, (&c, &n)| {
            debug_assert!(c < n);
            acc * n + c
        })
    }

    /// Inverse of [`Tensor::offset`].
    pub fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.shape.len()];
        for i in (0..self.shape.len()).rev() {
            out[i] = index % self.shape[i];
            index /= self.shape[i];
        }
        out
    }

    pub fn get(&self, coords: &[usize]) -> f64 {
        self.data[self.offset(coords)]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(format!("expected H×W×C, got {:?}", self.shape))),
        }
    }

    /// `(H, W)` of a rank-2 map, or of a rank-3 map with a single channel.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] | [h, w, 1] => Ok((h, w)),
            _ => Err(Error::shape(format!("expected H×W map, got {:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        ensure_same_shape(self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Pixel vector at `(y, x)` of an `H × W × C` map.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let (w, c) = (self.shape[1], self.shape[2]);
        let o = (y * w + x) * c;
        &self.data[o..o + c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let (w, c) = (self.shape[1], self.shape[2]);
        let o = (y * w + x) * c;
        &mut self.data[o..o + c]
    }
}

pub(crate) fn ensure_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Exp,
    Log,
    Clip { lo: f64, hi: f64 },
    Relu,
    Abs,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div | Self::Max)
    }
}

/// Pointwise application. Division by zero and logarithms of non-positive
/// values are errors, never silent non-finite output.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    use ElementwiseOp::*;
    match (op.is_binary(), b) {
        (true, Some(b)) => {
            ensure_same_shape(a, b)?;
            if op == Div && b.data.iter().any(|&v| v == 0.0) {
                return Err(Error::DivisionByZero);
            }
            let f = match op {
                Add => |x: f64, y: f64| x + y,
                Sub => |x, y| x - y,
                Mul => |x, y| x * y,
                Div => |x, y| x / y,
                Max => |x: f64, y: f64| if x >= y { x } else { y },
                _ => unreachable!(),
            };
            a.zip_map(b, f)
        }
        (false, None) => match op {
            Exp => Ok(a.map(math::exp)),
            Log => {
                if let Some(&v) = a.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::LogNonPositive(v));
                }
                Ok(a.map(math::ln))
            }
            Clip { lo, hi } => {
                if lo > hi {
                    return Err(Error::input("clip bounds reversed"));
                }
                Ok(a.map(|v| v.max(lo).min(hi)))
            }
            Relu => Ok(a.map(|v| if v > 0.0 { v } else { 0.0 })),
            Abs => Ok(a.map(f64::abs)),
            _ => unreachable!(),
        },
        (true, None) => Err(Error::input(format!("{op:?} needs two operands"))),
        (false, Some(_)) => Err(Error::input(format!("{op:?} takes one operand"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    L2Norm,
    LinfNorm,
}

/// Layout helper mapping input offsets to output offsets of a reduction.
pub(crate) struct Reduction {
    pub out_shape: Vec<usize>,
    in_shape: Vec<usize>,
    keep: Vec<bool>,
    pub count: usize,
}

impl Reduction {
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let mut keep = vec![true; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::shape(format!("axis {ax} out of range for {shape:?}")));
            }
            if !keep[ax] {
                return Err(Error::shape(format!("axis {ax} repeated")));
            }
            keep[ax] = false;
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if count == 0 {
            return Err(Error::EmptyReduction);
        }
        let out_shape = shape.iter().zip(&keep).filter(|(_, &k)| k).map(|(&n, _)| n).collect();
        Ok(Reduction { out_shape, in_shape: shape.to_vec(), keep, count })
    }

    /// Output offset for every input offset, in input order.
    pub fn index_map(&self) -> Vec<usize> {
        let n: usize = self.in_shape.iter().product();
        let mut out = Vec::with_capacity(n);
        let mut coords = vec![0usize; self.in_shape.len()];
        for _ in 0..n {
            let mut o = 0;
            for (i, &c) in coords.iter().enumerate() {
                if self.keep[i] {
                    o = o * self.in_shape[i] + c;
                }
            }
            out.push(o);
            for i in (0..coords.len()).rev() {
                coords[i] += 1;
                if coords[i] < self.in_shape[i] {
                    break;
                }
                coords[i] = 0;
            }
        }
        out
    }
}

pub fn reduce(op: ReduceOp, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let red = Reduction::new(&a.shape, axes)?;
    let map = red.index_map();
    let out_len: usize = red.out_shape.iter().product();
    let init = match op {
        ReduceOp::Max => f64::NEG_INFINITY,
        _ => 0.0,
    };
    let mut acc = vec![init; out_len];
    for (&v, &o) in a.data.iter().zip(&map) {
        match op {
            ReduceOp::Sum | ReduceOp::Mean => acc[o] += v,
            ReduceOp::Max => acc[o] = acc[o].max(v),
            ReduceOp::L2Norm => acc[o] += v * v,
            ReduceOp::LinfNorm => acc[o] = acc[o].max(v.abs()),
        }
    }
    match op {
        ReduceOp::Mean => acc.iter_mut().for_each(|v| *v /= red.count as f64),
        ReduceOp::L2Norm => acc.iter_mut().for_each(|v| *v = math::sqrt(*v)),
        _ => {}
    }
    Tensor::new(&red.out_shape, acc)
}

/// In-place stable softmax of one slice.
pub(crate) fn softmax_slice(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = math::exp(*v - m);
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
}

/// Softmax along `axis`. When `mask` is given (same length as `a`), entries
/// with `false` are excluded and come out exactly zero.
pub fn softmax(a: &Tensor, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::shape(format!("axis {axis} out of range for {:?}", a.shape)));
    }
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(Error::shape("mask length differs from tensor length"));
        }
    }
    let n = a.shape[axis];
    if n == 0 {
        return Err(Error::EmptyReduction);
    }
    let stride: usize = a.shape[axis + 1..].iter().product();
    let outer: usize = a.shape[..axis].iter().product();
    let mut out = vec![0.0; a.len()];
    let valid = |i: usize| mask.map_or(true, |m| m[i]);
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * n * stride + inner;
            let idx = |k: usize| base + k * stride;
            let mut m = f64::NEG_INFINITY;
            let mut any = false;
            for k in 0..n {
                if valid(idx(k)) {
                    any = true;
                    m = m.max(a.data[idx(k)]);
                }
            }
            if !any {
                return Err(Error::AllMasked);
            }
            let mut s = 0.0;
            for k in 0..n {
                if valid(idx(k)) {
                    let e = math::exp(a.data[idx(k)] - m);
                    out[idx(k)] = e;
                    s += e;
                }
            }
            for k in 0..n {
                out[idx(k)] /= s;
            }
        }
    }
    Tensor::new(&a.shape, out)
}

/// `[m, k] × [k, n] → [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape[..] {
        [m, k] => (m, k),
        _ => return Err(Error::shape("matmul lhs must be rank 2")),
    };
    let n = match b.shape[..] {
        [k2, n] if k2 == k => n,
        _ => return Err(Error::shape(format!("matmul {:?} × {:?}", a.shape, b.shape))),
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    let (m, n) = match a.shape[..] {
        [m, n] => (m, n),
        _ => return Err(Error::shape("transpose needs rank 2")),
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}
