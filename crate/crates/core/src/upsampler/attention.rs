//! Cross-scale neighborhood attention.
//!
//! A high-resolution query at `(x, y)` anchors to the low-resolution cell
//! `(⌊x/s⌋, ⌊y/s⌋)` and attends to the `w × w` cells around it. Cells outside
//! the low-resolution grid are masked out and the softmax renormalizes over
//! the remaining ones. Logits are scaled by `1/√d`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{softmax_slice, Backward, Tape, Tensor, Var};

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    lh: usize,
    lw: usize,
    d: usize,
    c: usize,
    ratio: usize,
    window: usize,
}

impl Geometry {
    fn new(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Result<Self> {
        let (h, w, d) = q.dims3()?;
        let (lh, lw, dk) = k.dims3()?;
        let (vh, vw, c) = v.dims3()?;
        if dk != d || (vh, vw) != (lh, lw) {
            return Err(Error::shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if lh == 0 || lw == 0 || h % lh != 0 || w % lw != 0 || h / lh != w / lw {
            return Err(Error::shape("query grid must be an integer multiple of the key grid"));
        }
        if window == 0 || window % 2 == 0 {
            return Err(Error::config(format!("attention window must be odd, got {window}")));
        }
        Ok(Geometry { h, w, lh, lw, d, c, ratio: h / lh, window })
    }

    /// Key cell for each window slot of query `(y, x)`, `None` when masked.
    fn slots(&self, y: usize, x: usize, out: &mut [Option<usize>]) {
        let r = (self.window / 2) as isize;
        let (cy, cx) = ((y / self.ratio) as isize, (x / self.ratio) as isize);
        let mut k = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (ky, kx) = (cy + dy, cx + dx);
                out[k] = if ky >= 0 && kx >= 0 && ky < self.lh as isize && kx < self.lw as isize {
                    Some(ky as usize * self.lw + kx as usize)
                } else {
                    None
                };
                k += 1;
            }
        }
    }
}

/// Output and the per-query attention weights (`H·W × w²`, masked slots 0).
fn forward(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Result<(Tensor, Vec<f64>)> {
    let g = Geometry::new(q, k, v, window)?;
    let n = window * window;
    let scale = 1.0 / math::sqrt(g.d as f64);
    let mut weights = vec![0.0; g.h * g.w * n];
    let mut out = vec![0.0; g.h * g.w * g.c];
    let mut slots = vec![None; n];
    let mut logits = Vec::with_capacity(n);
    for y in 0..g.h {
        for x in 0..g.w {
            g.slots(y, x, &mut slots);
            let qp = q.pixel(y, x);
            logits.clear();
            for s in slots.iter().flatten() {
                let kp = &k.data()[s * g.d..(s + 1) * g.d];
                logits.push(qp.iter().zip(kp).map(|(a, b)| a * b).sum::<f64>() * scale);
            }
            if logits.is_empty() {
                return Err(Error::AllMasked);
            }
            softmax_slice(&mut logits);
            let p = y * g.w + x;
            let wrow = &mut weights[p * n..(p + 1) * n];
            let o = &mut out[p * g.c..(p + 1) * g.c];
            let mut j = 0;
            for (slot, s) in slots.iter().enumerate() {
                if let Some(s) = s {
                    let a = logits[j];
                    j += 1;
                    wrow[slot] = a;
                    for (oo, &vv) in o.iter_mut().zip(&v.data()[s * g.c..(s + 1) * g.c]) {
                        *oo += a * vv;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[g.h, g.w, g.c], out)?, weights))
}

/// Attention output `H × W × C`, a convex combination of `v` rows per query.
pub fn neighborhood_attention(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Result<Tensor> {
    Ok(forward(q, k, v, window)?.0)
}

/// Per-query attention weights, `H × W × w²` in window order.
pub fn attention_weights(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Result<Tensor> {
    let (h, w, _) = q.dims3()?;
    let (_, weights) = forward(q, k, v, window)?;
    Tensor::new(&[h, w, window * window], weights)
}

pub fn neighborhood_attention_var(tape: &mut Tape, q: Var, k: Var, v: Var, window: usize) -> Result<Var> {
    let (out, weights) = forward(tape.value(q), tape.value(k), tape.value(v), window)?;
    Ok(tape.record(out, &[q, k, v], AttentionRule { weights, window }))
}

struct AttentionRule {
    weights: Vec<f64>,
    window: usize,
}

impl Backward for AttentionRule {
    fn backward(&self, p: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (q, k, v) = (p[0], p[1], p[2]);
        let g = Geometry::new(q, k, v, self.window).expect("checked in forward");
        let n = self.window * self.window;
        let scale = 1.0 / math::sqrt(g.d as f64);
        let mut gq = vec![0.0; q.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gv = vec![0.0; v.len()];
        let mut slots = vec![None; n];
        let mut ga = vec![0.0; n];
        for y in 0..g.h {
            for x in 0..g.w {
                let pi = y * g.w + x;
                g.slots(y, x, &mut slots);
                let a = &self.weights[pi * n..(pi + 1) * n];
                let go = grad.pixel(y, x);
                let mut mean = 0.0;
                for (slot, s) in slots.iter().enumerate() {
                    if let Some(s) = s {
                        let vs = &v.data()[s * g.c..(s + 1) * g.c];
                        ga[slot] = go.iter().zip(vs).map(|(a, b)| a * b).sum();
                        mean += a[slot] * ga[slot];
                        for (gvv, &gg) in gv[s * g.c..(s + 1) * g.c].iter_mut().zip(go) {
                            *gvv += a[slot] * gg;
                        }
                    }
                }
                let qp = q.pixel(y, x);
                let gqp = &mut gq[pi * g.d..(pi + 1) * g.d];
                for (slot, s) in slots.iter().enumerate() {
                    if let Some(s) = s {
                        let gl = a[slot] * (ga[slot] - mean) * scale;
                        if gl == 0.0 {
                            continue;
                        }
                        let ks = &k.data()[s * g.d..(s + 1) * g.d];
                        for (gqq, &kk) in gqp.iter_mut().zip(ks) {
                            *gqq += gl * kk;
                        }
                        for (gkk, &qq) in gk[s * g.d..(s + 1) * g.d].iter_mut().zip(qp) {
                            *gkk += gl * qq;
                        }
                    }
                }
            }
        }
        vec![
            Tensor::new(q.shape(), gq).expect("shape"),
            Tensor::new(k.shape(), gk).expect("shape"),
            Tensor::new(v.shape(), gv).expect("shape"),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig, Rng};

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn single_key_window_copies_nearest_cell() {
        let mut rng = Rng::new(0, 0);
        let q = random(&mut rng, &[6, 6, 4]);
        let k = random(&mut rng, &[3, 3, 4]);
        let v = random(&mut rng, &[3, 3, 5]);
        let out = neighborhood_attention(&q, &k, &v, 1).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(out.pixel(y, x), v.pixel(y / 2, x / 2));
            }
        }
    }

    #[test]
    fn weights_normalized_and_masked() {
        let mut rng = Rng::new(1, 0);
        let q = random(&mut rng, &[4, 4, 4]);
        let k = random(&mut rng, &[2, 2, 4]);
        let v = random(&mut rng, &[2, 2, 1]);
        let a = attention_weights(&q, &k, &v, 3).unwrap();
        for p in a.data().chunks_exact(9) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Query (0,0) anchors to cell (0,0): the whole top row and left column are masked.
        let p0 = &a.data()[..9];
        for slot in [0, 1, 2, 3, 6] {
            assert_eq!(p0[slot], 0.0);
        }
    }

    #[test]
    fn rejects_inconsistent_grids() {
        let q = Tensor::zeros(&[5, 4, 4]);
        let k = Tensor::zeros(&[2, 2, 4]);
        assert!(neighborhood_attention(&q, &k, &Tensor::zeros(&[2, 2, 1]), 3).is_err());
        let q = Tensor::zeros(&[4, 4, 4]);
        assert!(neighborhood_attention(&q, &k, &Tensor::zeros(&[2, 2, 1]), 2).is_err());
    }

    #[test]
    fn gradient_matches_fd() {
        for seed in 0..50 {
            let mut rng = Rng::new(seed, 11);
            let q = random(&mut rng, &[4, 6, 4]);
            let k = random(&mut rng, &[2, 3, 4]);
            let v = random(&mut rng, &[2, 3, 3]);
            let rep = grad_check(
                |t, vars| {
                    let o = neighborhood_attention_var(t, vars[0], vars[1], vars[2], 3)?;
                    crate::numerics::tape::sum_of_squares(t, o)
                },
                &[q, k, v],
                &GradCheckConfig::default(),
                &mut rng,
            )
            .unwrap();
            assert!(rep.passed, "seed {seed}: {:?}", rep.params);
        }
    }
}
