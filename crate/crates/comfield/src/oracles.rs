//! Brute-force references written directly from the definitions.
//!
//! Nothing here calls into the core crate's numerics: inputs are read with
//! `Tensor::get` and every quantity is recomputed with plain loops and `std`
//! float math.

use comfield_core::Tensor;

fn at3(t: &Tensor, y: usize, x: usize, c: usize) -> f64 {
    t.get(&[y, x, c])
}

fn clamp(i: isize, n: usize) -> usize {
    i.max(0).min(n as isize - 1) as usize
}

/// Affinity rows `[p][window slot]`, clamped windows, row-major slots.
pub fn affinity(z: &Tensor, window: usize, tau: f64) -> Vec<Vec<f64>> {
    let (h, w, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let r = (window / 2) as isize;
    let mut rows = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut logits = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qy, qx) = (clamp(y as isize + dy, h), clamp(x as isize + dx, w));
                    let mut s = 0.0;
                    for c in 0..d {
                        s += at3(z, y, x, c) * at3(z, qy, qx, c);
                    }
                    logits.push(s / tau);
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let total: f64 = e.iter().sum();
            rows.push(e.iter().map(|v| v / total).collect());
        }
    }
    rows
}

pub fn entropy(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()).collect()
}

pub fn spikiness(z: &Tensor, eps: f64) -> Vec<f64> {
    let (h, w, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut linf: f64 = 0.0;
            let mut sq = 0.0;
            for c in 0..d {
                let v = at3(z, y, x, c);
                linf = linf.max(v.abs());
                sq += v * v;
            }
            out.push(linf / (sq.sqrt() + eps));
        }
    }
    out
}

/// `[p] -> (bx, by)`.
pub fn com(rows: &[Vec<f64>], window: usize) -> Vec<(f64, f64)> {
    let r = (window / 2) as isize;
    rows.iter()
        .map(|row| {
            let (mut mx, mut my) = (0.0, 0.0);
            let mut k = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    mx += row[k] * dx as f64;
                    my += row[k] * dy as f64;
                    k += 1;
                }
            }
            if r == 0 {
                return (0.0, 0.0);
            }
            let n = |v: f64| (v / r as f64).max(-1.0).min(1.0);
            (n(mx), n(my))
        })
        .collect()
}

/// `z = F · M` with `M` of shape `C × d`.
pub fn project(f: &Tensor, m: &Tensor) -> Tensor {
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let d = m.shape()[1];
    Tensor::from_fn(&[h, w, d], |i| {
        let (p, j) = (i / d, i % d);
        (0..c).map(|k| f.data()[p * c + k] * m.get(&[k, j])).sum()
    })
}

pub struct SourceField {
    pub entropy: Vec<f64>,
    pub spikiness: Vec<f64>,
    pub com: Vec<(f64, f64)>,
}

pub fn field(z: &Tensor, window: usize, tau: f64, eps: f64) -> SourceField {
    let rows = affinity(z, window, tau);
    SourceField { entropy: entropy(&rows), spikiness: spikiness(z, eps), com: com(&rows, window) }
}

/// Selected source index and consensus vector per position.
pub fn consensus(fields: &[SourceField], beta: f64, gamma: f64, floor: f64) -> (Vec<usize>, Vec<(f64, f64)>) {
    let n = fields[0].entropy.len();
    let scores: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| {
            let mean = f.entropy.iter().sum::<f64>() / n as f64;
            let var = f.entropy.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / n as f64;
            let sd = var.sqrt().max(floor);
            (0..n).map(|p| -(f.entropy[p] - mean) / sd - beta * (f.spikiness[p] - gamma).max(0.0)).collect()
        })
        .collect();
    let mut idx = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let mut best = 0;
        for i in 1..fields.len() {
            if scores[i][p] > scores[best][p] {
                best = i;
            }
        }
        idx.push(best);
        out.push(fields[best].com[p]);
    }
    (idx, out)
}

/// Cross-scale neighborhood attention, one query at a time.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Tensor {
    let (h, w, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (lh, lw, c) = (k.shape()[0], k.shape()[1], v.shape()[2]);
    let s = h / lh;
    let r = (window / 2) as isize;
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            let (cy, cx) = ((y / s) as isize, (x / s) as isize);
            let mut cells = Vec::new();
            let mut logits = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ky, kx) = (cy + dy, cx + dx);
                    if ky < 0 || kx < 0 || ky >= lh as isize || kx >= lw as isize {
                        continue;
                    }
                    let (ky, kx) = (ky as usize, kx as usize);
                    let dotp: f64 = (0..d).map(|j| at3(q, y, x, j) * at3(k, ky, kx, j)).sum();
                    logits.push(dotp / (d as f64).sqrt());
                    cells.push((ky, kx));
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for j in 0..c {
                let val: f64 = cells.iter().zip(&e).map(|(&(ky, kx), a)| a / total * at3(v, ky, kx, j)).sum();
                out.data_mut()[(y * w + x) * c + j] = val;
            }
        }
    }
    out
}

pub fn loss_rec(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.data().len();
    (0..n).map(|i| (a.data()[i] - b.data()[i]).powi(2)).sum::<f64>() / n as f64
}

/// `b̂` from `pred` with identity projection, then mean per-position L1.
pub fn loss_guide(pred: &Tensor, b_ens: &Tensor, window: usize, tau: f64) -> f64 {
    let rows = affinity(pred, window, tau);
    let b = com(&rows, window);
    let n = b.len();
    let w = pred.shape()[1];
    let mut s = 0.0;
    for (p, (bx, by)) in b.iter().enumerate() {
        let (y, x) = (p / w, p % w);
        s += (bx - at3(b_ens, y, x, 0)).abs() + (by - at3(b_ens, y, x, 1)).abs();
    }
    s / n as f64
}

/// Stride-1 zero-padded convolution, kernel `k × k × cin × cout`.
pub fn conv(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
    let pad = (k / 2) as isize;
    Tensor::from_fn(&[h, w, cout], |i| {
        let (p, o) = (i / cout, i % cout);
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        let mut s = bias.data()[o];
        for ky in 0..k {
            for kx in 0..k {
                let (iy, ix) = (y + ky as isize - pad, x + kx as isize - pad);
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                    continue;
                }
                for ci in 0..cin {
                    s += at3(input, iy as usize, ix as usize, ci) * kernel.get(&[ky, kx, ci, o]);
                }
            }
        }
        s
    })
}

/// Rotary embedding with positions `(index + 0.5) / cell`; pair `i` of
/// `n = d/4` turns at `base^(-i/n)`; x rotates the first half, y the second.
pub fn rope(g: &Tensor, base: f64, cell: f64) -> Tensor {
    let (h, w, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let n = d / 4;
    let mut out = g.clone();
    for y in 0..h {
        for x in 0..w {
            for i in 0..n {
                let f = base.powf(-(i as f64) / n as f64);
                for (half, pos) in [(0, (x as f64 + 0.5) / cell), (d / 2, (y as f64 + 0.5) / cell)] {
                    let (a, b) = (at3(g, y, x, half + 2 * i), at3(g, y, x, half + 2 * i + 1));
                    let (s, c) = (pos * f).sin_cos();
                    let base_idx = (y * w + x) * d + half + 2 * i;
                    out.data_mut()[base_idx] = a * c - b * s;
                    out.data_mut()[base_idx + 1] = a * s + b * c;
                }
            }
        }
    }
    out
}

pub fn avg_pool(g: &Tensor, s: usize) -> Tensor {
    let (h, w, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    Tensor::from_fn(&[h / s, w / s, d], |i| {
        let (p, j) = (i / d, i % d);
        let (y, x) = (p / (w / s), p % (w / s));
        let mut acc = 0.0;
        for dy in 0..s {
            for dx in 0..s {
                acc += at3(g, y * s + dy, x * s + dx, j);
            }
        }
        acc / (s * s) as f64
    })
}

/// Whole upsampler from its parameter tensors (kernel, bias pairs).
pub fn upsample(image: &Tensor, f_lr: &Tensor, params: &[&Tensor], window: usize, ratio: usize, base: f64) -> Tensor {
    let mut x = image.clone();
    let layers = params.len() / 2;
    for l in 0..layers {
        x = conv(&x, params[2 * l], params[2 * l + 1]);
        if l + 1 < layers {
            x = x.map(|v| v / (1.0 + (-v).exp()));
        }
    }
    let q = rope(&x, base, ratio as f64);
    let k = avg_pool(&q, ratio);
    attention(&q, &k, f_lr, window)
}
