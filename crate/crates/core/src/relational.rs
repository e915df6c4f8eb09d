//! Relational representation of a feature map: local self-affinity, its
//! entropy, channel spikiness, and the clipped center-of-mass (COM) field.
//!
//! Conventions: the affinity tensor is `H × W × w × w`, indexed by window row
//! (`dy + r`) then window column (`dx + r`). Offsets are `(Δx, Δy)` with x to
//! the right and y downward; the COM field stores `Δx` in channel 0 and `Δy`
//! in channel 1, in units of the window radius `r = ⌊w/2⌋`. Window samples
//! outside the map are clamped to the nearest edge cell.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{softmax_slice, Backward, FeatureMap, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct RelationalConfig {
    /// Odd window side `w`.
    pub window: usize,
    /// Softmax temperature `τ`.
    pub temperature: f64,
    pub projection_seed: u64,
    /// Common projected dimension `d`.
    pub dim: usize,
    /// Spikiness stabilizer `ε`.
    pub eps: f64,
}

impl Default for RelationalConfig {
    fn default() -> Self {
        RelationalConfig { window: 7, temperature: 4.0, projection_seed: 0, dim: 16, eps: 1e-6 }
    }
}

impl RelationalConfig {
    /// Config with `τ = √d`.
    pub fn with_dim(window: usize, dim: usize) -> Self {
        RelationalConfig { window, dim, temperature: math::sqrt(dim as f64), ..Self::default() }
    }

    pub fn radius(&self) -> usize {
        self.window / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::config(format!("relational window must be odd, got {}", self.window)));
        }
        if !(self.temperature > 0.0) || !(self.eps > 0.0) || self.dim == 0 {
            return Err(Error::config("relational temperature, eps and dim must be positive"));
        }
        Ok(())
    }
}

/// Frozen per-source linear map from `C` raw channels to `d` channels.
///
/// The matrix is a seeded sparse signed isometry: every raw channel feeds
/// exactly one output channel. With `C ≥ d` the columns are orthonormal
/// (each output averages a disjoint channel group); with `C < d` the rows
/// are orthonormal (each raw channel lands on its own output). Either way a
/// single-channel spike in `F` stays a single-channel spike in `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `C × d`, row-major.
    matrix: Tensor,
}

impl Projection {
    pub fn seeded(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("projection dimensions must be positive"));
        }
        let mut rng = Rng::new(seed, 0x5052_4f4a);
        let mut m = vec![0.0; in_dim * out_dim];
        let sign = |rng: &mut Rng| if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        if in_dim >= out_dim {
            let mut order: Vec<usize> = (0..in_dim).collect();
            rng.shuffle(&mut order);
            let mut group = vec![0usize; in_dim];
            for (k, &j) in order.iter().enumerate() {
                group[j] = if k < out_dim { k } else { rng.below(out_dim) };
            }
            let mut sizes = vec![0usize; out_dim];
            for &g in &group {
                sizes[g] += 1;
            }
            for j in 0..in_dim {
                let g = group[j];
                m[j * out_dim + g] = sign(&mut rng) / math::sqrt(sizes[g] as f64);
            }
        } else {
            let mut slots: Vec<usize> = (0..out_dim).collect();
            rng.shuffle(&mut slots);
            for j in 0..in_dim {
                m[j * out_dim + slots[j]] = sign(&mut rng);
            }
        }
        Ok(Projection { matrix: Tensor::new(&[in_dim, out_dim], m)? })
    }

    pub fn identity(dim: usize) -> Self {
        Projection { matrix: Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 }) }
    }

    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::shape("projection matrix must be rank 2"));
        }
        Ok(Projection { matrix })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.shape()[1]
    }
}

/// `z(p) = φᵀ F(p)` at every position.
pub fn project(f: &FeatureMap, phi: &Projection) -> Result<FeatureMap> {
    let (h, w, c) = f.dims3()?;
    if c != phi.in_dim() {
        return Err(Error::shape(format!("feature channels {c} vs projection input {}", phi.in_dim())));
    }
    let d = phi.out_dim();
    let m = phi.matrix.data();
    let mut out = vec![0.0; h * w * d];
    for (px, o) in f.data().chunks_exact(c.max(1)).zip(out.chunks_exact_mut(d)) {
        for (j, &v) in px.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (oi, &mj) in o.iter_mut().zip(&m[j * d..(j + 1) * d]) {
                *oi += v * mj;
            }
        }
    }
    Tensor::new(&[h, w, d], out)
}

#[inline]
fn clamp_offset(i: usize, delta: isize, n: usize) -> usize {
    (i as isize + delta).clamp(0, n as isize - 1) as usize
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `S(p, ·) = softmax_{q ∈ N(p)} ⟨z(p), z(q)⟩ / τ` over the clamped `w × w` window.
pub fn local_affinity(z: &FeatureMap, cfg: &RelationalConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (h, w, _) = z.dims3()?;
    let win = cfg.window;
    let r = cfg.radius() as isize;
    let n = win * win;
    let inv_tau = 1.0 / cfg.temperature;
    let mut out = vec![0.0; h * w * n];
    for y in 0..h {
        for x in 0..w {
            let zp = z.pixel(y, x);
            let row = &mut out[(y * w + x) * n..(y * w + x + 1) * n];
            let mut k = 0;
            for dy in -r..=r {
                let qy = clamp_offset(y, dy, h);
                for dx in -r..=r {
                    let qx = clamp_offset(x, dx, w);
                    row[k] = dot(zp, z.pixel(qy, qx)) * inv_tau;
                    k += 1;
                }
            }
            softmax_slice(row);
        }
    }
    Tensor::new(&[h, w, win, win], out)
}

fn affinity_dims(s: &Tensor) -> Result<(usize, usize, usize)> {
    match s.shape()[..] {
        [h, w, a, b] if a == b && a % 2 == 1 => Ok((h, w, a)),
        _ => Err(Error::shape(format!("expected H×W×w×w affinity, got {:?}", s.shape()))),
    }
}

/// Shannon entropy (nats) of each affinity row, with `0·log 0 = 0`.
pub fn entropy(s: &Tensor) -> Result<Tensor> {
    let (h, w, win) = affinity_dims(s)?;
    let n = win * win;
    let data = s
        .data()
        .chunks_exact(n)
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * math::ln(p)).sum::<f64>())
        .collect();
    Tensor::new(&[h, w], data)
}

/// `K(p) = ‖z(p)‖∞ / (‖z(p)‖₂ + ε)`.
pub fn spikiness(z: &FeatureMap, eps: f64) -> Result<Tensor> {
    let (h, w, c) = z.dims3()?;
    if !(eps > 0.0) {
        return Err(Error::config("spikiness eps must be positive"));
    }
    let data = (0..h * w)
        .map(|i| {
            let v = &z.data()[i * c..(i + 1) * c];
            let linf = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let l2 = math::sqrt(dot(v, v));
            linf / (l2 + eps)
        })
        .collect();
    Tensor::new(&[h, w], data)
}

/// `μ(p) = Σ_q S(p,q) Δ(q)`, returned unclipped as `H × W × 2`.
///
/// Mirrored offsets are paired as `d · (S(+d) − S(−d))` so a symmetric
/// distribution yields an exact zero.
fn expected_offset(s: &Tensor) -> Result<Tensor> {
    let (h, w, win) = affinity_dims(s)?;
    let r = win / 2;
    let n = win * win;
    let mut out = vec![0.0; h * w * 2];
    for (row, mu) in s.data().chunks_exact(n).zip(out.chunks_exact_mut(2)) {
        let at = |y: usize, x: usize| row[y * win + x];
        for d in 1..=r {
            let (mut gx, mut gy) = (0.0, 0.0);
            for t in 0..win {
                gx += at(t, r + d) - at(t, r - d);
                gy += at(r + d, t) - at(r - d, t);
            }
            mu[0] += d as f64 * gx;
            mu[1] += d as f64 * gy;
        }
    }
    Tensor::new(&[h, w, 2], out)
}

/// `b(p) = clip(μ(p) / r, -1, 1)` componentwise.
pub fn com_field(s: &Tensor, cfg: &RelationalConfig) -> Result<Tensor> {
    let (_, _, win) = affinity_dims(s)?;
    if win != cfg.window {
        return Err(Error::shape("affinity window differs from config"));
    }
    let mu = expected_offset(s)?;
    Ok(normalize_offsets(&mu, cfg.radius()))
}

fn normalize_offsets(mu: &Tensor, r: usize) -> Tensor {
    if r == 0 {
        return Tensor::zeros(mu.shape());
    }
    let inv = 1.0 / r as f64;
    mu.map(|v| (v * inv).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationalField {
    /// `H × W`, nats.
    pub entropy: Tensor,
    /// `H × W`.
    pub spikiness: Tensor,
    /// `H × W × 2`, `(Δx, Δy)` in `[-1, 1]`.
    pub com: Tensor,
}

/// Entropy, spikiness and COM field of `f`, projected by `phi` when given.
pub fn relational_field(f: &FeatureMap, phi: Option<&Projection>, cfg: &RelationalConfig) -> Result<RelationalField> {
    let projected;
    let z = match phi {
        Some(p) => {
            projected = project(f, p)?;
            &projected
        }
        None => f,
    };
    let s = local_affinity(z, cfg)?;
    Ok(RelationalField { entropy: entropy(&s)?, spikiness: spikiness(z, cfg.eps)?, com: com_field(&s, cfg)? })
}

/// COM field of an (unprojected) map recorded on the tape.
pub fn com_field_var(tape: &mut Tape, z: Var, cfg: &RelationalConfig) -> Result<Var> {
    let s = local_affinity(tape.value(z), cfg)?;
    let mu = expected_offset(&s)?;
    let b = normalize_offsets(&mu, cfg.radius());
    let rule = ComFieldRule { affinity: s, mu, window: cfg.window, inv_tau: 1.0 / cfg.temperature };
    Ok(tape.record(b, &[z], rule))
}

struct ComFieldRule {
    affinity: Tensor,
    mu: Tensor,
    window: usize,
    inv_tau: f64,
}

impl Backward for ComFieldRule {
    fn backward(&self, parents: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let z = parents[0];
        let (h, w, c) = z.dims3().expect("checked in forward");
        let win = self.window;
        let r = (win / 2) as isize;
        let n = win * win;
        let mut gz = vec![0.0; z.len()];
        if r == 0 {
            return vec![Tensor::new(z.shape(), gz).expect("shape")];
        }
        let inv_r = 1.0 / r as f64;
        let mu = self.mu.data();
        let gd = grad.data();
        let mut gl = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                // Through the clip: pass-through strictly inside (-1, 1).
                let mut gmu = [0.0; 2];
                for a in 0..2 {
                    let b = mu[p * 2 + a] * inv_r;
                    if b > -1.0 && b < 1.0 {
                        gmu[a] = gd[p * 2 + a] * inv_r;
                    }
                }
                if gmu == [0.0, 0.0] {
                    continue;
                }
                let srow = &self.affinity.data()[p * n..(p + 1) * n];
                let base = gmu[0] * mu[p * 2] + gmu[1] * mu[p * 2 + 1];
                let mut k = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        gl[k] = srow[k] * (gmu[0] * dx as f64 + gmu[1] * dy as f64 - base) * self.inv_tau;
                        k += 1;
                    }
                }
                let mut k = 0;
                for dy in -r..=r {
                    let qy = clamp_offset(y, dy, h);
                    for dx in -r..=r {
                        let qx = clamp_offset(x, dx, w);
                        let g = gl[k];
                        k += 1;
                        if g == 0.0 {
                            continue;
                        }
                        let q = qy * w + qx;
                        for ch in 0..c {
                            let zp = z.data()[p * c + ch];
                            let zq = z.data()[q * c + ch];
                            gz[p * c + ch] += g * zq;
                            gz[q * c + ch] += g * zp;
                        }
                    }
                }
            }
        }
        vec![Tensor::new(z.shape(), gz).expect("shape")]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig};

    fn random_map(rng: &mut Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[h, w, c], |_| rng.normal())
    }

    #[test]
    fn projection_orthonormal() {
        for (c, d) in [(24, 16), (16, 16), (8, 16), (40, 3)] {
            let p = Projection::seeded(c, d, 9).unwrap();
            let m = p.matrix().data();
            let (rows, cols, gram_dim) = if c >= d { (c, d, d) } else { (d, c, c) };
            let _ = rows;
            for a in 0..gram_dim {
                for b in 0..gram_dim {
                    let g: f64 = if c >= d {
                        (0..c).map(|j| m[j * cols + a] * m[j * cols + b]).sum()
                    } else {
                        (0..d).map(|i| m[a * d + i] * m[b * d + i]).sum()
                    };
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((g - want).abs() < 1e-10, "{c}x{d} gram[{a},{b}]={g}");
                }
            }
        }
    }

    #[test]
    fn projection_keeps_spikes() {
        let p = Projection::seeded(24, 16, 3).unwrap();
        let mut f = Tensor::full(&[1, 1, 24], 0.3);
        f.data_mut()[5] = 10.0;
        let k = spikiness(&project(&f, &p).unwrap(), 1e-6).unwrap();
        assert!(k.item() > 0.9, "{}", k.item());
    }

    #[test]
    fn project_identity_and_zero() {
        let mut rng = Rng::new(1, 0);
        let f = random_map(&mut rng, 3, 3, 4);
        assert_eq!(project(&f, &Projection::identity(4)).unwrap(), f);
        let z = project(&Tensor::zeros(&[2, 2, 6]), &Projection::seeded(6, 3, 0).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(project(&f, &Projection::identity(5)).is_err());
    }

    #[test]
    fn constant_map_is_uniform() {
        let cfg = RelationalConfig::with_dim(3, 2);
        let f = Tensor::full(&[4, 5, 2], 0.4);
        let s = local_affinity(&f, &cfg).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
        let rf = relational_field(&f, None, &cfg).unwrap();
        assert!(rf.com.data().iter().all(|&v| v.abs() < 1e-15));
        assert!(rf.entropy.data().iter().all(|&v| (v - libm::log(9.0)).abs() < 1e-12));
    }

    #[test]
    fn one_hot_contrast_closed_form() {
        let cfg = RelationalConfig { window: 3, temperature: 1.0, ..Default::default() };
        let mut f = Tensor::zeros(&[3, 3, 2]);
        for y in 0..3 {
            for x in 0..3 {
                f.pixel_mut(y, x)[1] = 1.0;
            }
        }
        f.pixel_mut(1, 1).copy_from_slice(&[1.0, 0.0]);
        let s = local_affinity(&f, &cfg).unwrap();
        let centre = s.get(&[1, 1, 1, 1]);
        let e = core::f64::consts::E;
        assert!((centre - e / (e + 8.0)).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        assert_eq!(entropy(&delta).unwrap().item(), 0.0);
        let u9 = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        assert!((entropy(&u9).unwrap().item() - 2.19722).abs() < 1e-5);
        let u49 = Tensor::full(&[1, 1, 7, 7], 1.0 / 49.0);
        assert!((entropy(&u49).unwrap().item() - 3.89182).abs() < 1e-5);
    }

    #[test]
    fn spikiness_examples() {
        let z = Tensor::new(&[1, 1, 2], alloc::vec![3.0, 4.0]).unwrap();
        assert!((spikiness(&z, 1e-12).unwrap().item() - 0.8).abs() < 1e-12);
        let one_hot = Tensor::new(&[1, 1, 3], alloc::vec![0.0, 1.0, 0.0]).unwrap();
        assert!((spikiness(&one_hot, 1e-6).unwrap().item() - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
        let flat = Tensor::full(&[1, 1, 4], 0.5);
        assert!((spikiness(&flat, 1e-6).unwrap().item() - 0.5 / (1.0 + 1e-6)).abs() < 1e-15);
        assert_eq!(spikiness(&Tensor::zeros(&[1, 1, 3]), 1e-6).unwrap().item(), 0.0);
    }

    #[test]
    fn com_on_concentrated_affinity() {
        let cfg = RelationalConfig { window: 3, ..Default::default() };
        let mut s = Tensor::zeros(&[1, 1, 3, 3]);
        // window row dy=0 (index 1), column dx=+1 (index 2)
        s.data_mut()[1 * 3 + 2] = 1.0;
        let b = com_field(&s, &cfg).unwrap();
        assert_eq!(b.data(), &[1.0, 0.0]);
        let u = Tensor::full(&[2, 2, 3, 3], 1.0 / 9.0);
        assert!(com_field(&u, &cfg).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn rejects_even_window() {
        let cfg = RelationalConfig { window: 4, ..Default::default() };
        assert!(matches!(local_affinity(&Tensor::zeros(&[2, 2, 1]), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn com_gradient_matches_fd() {
        for seed in 0..50 {
            let mut rng = Rng::new(seed, 7);
            let (h, w) = (3 + rng.below(3), 3 + rng.below(3));
            let c = 1 + rng.below(3);
            let f = random_map(&mut rng, h, w, c);
            let cfg = RelationalConfig { window: 3 + 2 * rng.below(2), temperature: 0.7 + rng.uniform(), ..Default::default() };
            let rep = grad_check(
                |t, v| {
                    let b = com_field_var(t, v[0], &cfg)?;
                    t.mean_all(b)
                },
                &[f],
                &GradCheckConfig::default(),
                &mut rng,
            )
            .unwrap();
            assert!(rep.passed, "seed {seed}: {:?}", rep.params);
        }
    }

    #[test]
    fn tape_and_plain_com_agree() {
        let mut rng = Rng::new(3, 0);
        let f = random_map(&mut rng, 5, 4, 3);
        let cfg = RelationalConfig::with_dim(5, 3);
        let mut tape = Tape::new();
        let v = tape.leaf(f.clone());
        let b = com_field_var(&mut tape, v, &cfg).unwrap();
        assert_eq!(tape.value(b), &relational_field(&f, None, &cfg).unwrap().com);
    }
}
