//! Two-dimensional rotary position embedding.
//!
//! The first half of the channels is rotated pairwise by the x position, the
//! second half by the y position. Pair `i` of `n = d/4` turns at angular
//! frequency `base^(-i/n)` radians per unit of position.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{Backward, Tape, Tensor, Var};

fn frequencies(dim: usize, base: f64) -> Vec<f64> {
    let n = dim / 4;
    (0..n).map(|i| math::pow(base, -(i as f64) / n as f64)).collect()
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::shape(format!("rope needs a channel count divisible by 4, got {d}")));
    }
    Ok(())
}

#[inline]
fn rotate_pairs(v: &mut [f64], freqs: &[f64], px: f64, py: f64, sign: f64) {
    let half = v.len() / 2;
    for (i, &f) in freqs.iter().enumerate() {
        for (offset, pos) in [(0, px), (half, py)] {
            let a = sign * pos * f;
            let (s, c) = (math::sin(a), math::cos(a));
            let (u, w) = (v[offset + 2 * i], v[offset + 2 * i + 1]);
            v[offset + 2 * i] = u * c - w * s;
            v[offset + 2 * i + 1] = u * s + w * c;
        }
    }
}

/// Rotates one vector for position `(px, py)`.
pub fn rope_rotate(v: &[f64], px: f64, py: f64, base: f64) -> Result<Vec<f64>> {
    check_dim(v.len())?;
    let mut out = v.to_vec();
    rotate_pairs(&mut out, &frequencies(v.len(), base), px, py, 1.0);
    Ok(out)
}

/// Pixel `(x, y)` sits at position `((x + 0.5) / cell, (y + 0.5) / cell)`,
/// i.e. positions are measured in units of one low-resolution cell so that
/// pooled keys share the frame of the queries.
pub fn position(index: usize, cell: f64) -> f64 {
    (index as f64 + 0.5) / cell
}

fn apply(g: &Tensor, base: f64, cell: f64, sign: f64) -> Result<Tensor> {
    let (h, w, d) = g.dims3()?;
    check_dim(d)?;
    let freqs = frequencies(d, base);
    let mut out = g.clone();
    for y in 0..h {
        for x in 0..w {
            rotate_pairs(out.pixel_mut(y, x), &freqs, position(x, cell), position(y, cell), sign);
        }
    }
    Ok(out)
}

pub fn rope2d(g: &Tensor, base: f64, cell: f64) -> Result<Tensor> {
    apply(g, base, cell, 1.0)
}

pub fn rope2d_var(tape: &mut Tape, g: Var, base: f64, cell: f64) -> Result<Var> {
    let out = rope2d(tape.value(g), base, cell)?;
    Ok(tape.record(out, &[g], RopeRule { base, cell }))
}

struct RopeRule {
    base: f64,
    cell: f64,
}

impl Backward for RopeRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Tensor> {
        // Rotations are orthogonal: the adjoint is the inverse rotation.
        vec![apply(g, self.base, self.cell, -1.0).expect("checked in forward")]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn norm(v: &[f64]) -> f64 {
        libm::sqrt(v.iter().map(|x| x * x).sum())
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn preserves_norm_and_origin_is_identity() {
        let mut rng = Rng::new(0, 0);
        for _ in 0..100 {
            let v: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let r = rope_rotate(&v, rng.range(-20.0, 20.0), rng.range(-20.0, 20.0), 100.0).unwrap();
            assert!((norm(&r) - norm(&v)).abs() < 1e-12);
            assert_eq!(rope_rotate(&v, 0.0, 0.0, 100.0).unwrap(), v);
        }
    }

    #[test]
    fn dot_depends_on_relative_position_only() {
        let mut rng = Rng::new(1, 0);
        for _ in 0..100 {
            let q: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let (px, py, kx, ky) = (rng.range(0.0, 8.0), rng.range(0.0, 8.0), rng.range(0.0, 8.0), rng.range(0.0, 8.0));
            let (sx, sy) = (rng.range(-5.0, 5.0), rng.range(-5.0, 5.0));
            let a = dot(&rope_rotate(&q, px, py, 100.0).unwrap(), &rope_rotate(&k, kx, ky, 100.0).unwrap());
            let b = dot(
                &rope_rotate(&q, px + sx, py + sy, 100.0).unwrap(),
                &rope_rotate(&k, kx + sx, ky + sy, 100.0).unwrap(),
            );
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_dim() {
        assert!(rope_rotate(&[1.0; 6], 1.0, 1.0, 100.0).is_err());
        assert!(rope2d(&Tensor::zeros(&[2, 2, 6]), 100.0, 1.0).is_err());
    }

    #[test]
    fn backward_is_inverse_rotation() {
        let mut rng = Rng::new(5, 0);
        let g = Tensor::from_fn(&[3, 3, 8], |_| rng.normal());
        let rep = crate::numerics::grad_check(
            |t, v| {
                let r = rope2d_var(t, v[0], 10.0, 2.0)?;
                let w = t.leaf(Tensor::from_fn(&[3, 3, 8], |i| libm::sin(i as f64 * 0.37)));
                let p = t.mul(r, w)?;
                t.sum_all(p)
            },
            &[g],
            &Default::default(),
            &mut rng,
        )
        .unwrap();
        assert!(rep.passed);
    }
}
