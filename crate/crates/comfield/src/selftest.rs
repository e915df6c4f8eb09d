//! Oracle, gradient and format checks behind `comfield selftest`.

use std::fmt;

use comfield_core::fusion::consensus_from_fields;
use comfield_core::numerics::{grad_check, GradCheckConfig, GradCheckReport};
use comfield_core::relational::{com_field, entropy, local_affinity, project, relational_field, spikiness, Projection, RelationalConfig};
use comfield_core::training::{loss_guide, loss_guide_var, loss_rec, loss_rec_var};
use comfield_core::upsampler::{neighborhood_attention, upsample, upsample_var, UpsamplerConfig, UpsamplerParams};
use comfield_core::{Rng, Tape, Tensor, Var};

use crate::error::{HarnessError, Result};
use crate::{checkpoint, fmap, oracles, pnm};

pub const ORACLE_TOLERANCE: f64 = 1e-12;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Relative-error denominator floor for the upsampler gradient suite.
/// Central differences at h = 1e-5 carry about 2e-10 of absolute roundoff
/// on these O(1) losses, so entries below 1e-5 are judged against the floor.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error, or another one-line diagnostic.
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{tag} {:<24} {}", self.name, self.detail)
    }
}

fn check(name: &str, worst: f64, tol: f64) -> Check {
    Check { name: name.into(), passed: worst.is_finite() && worst <= tol, detail: format!("max error {worst:.3e} (tol {tol:.0e})") }
}

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel_cfg(rng: &mut Rng) -> RelationalConfig {
    RelationalConfig {
        window: [1, 3, 5, 7][rng.below(4)],
        temperature: rng.range(0.5, 6.0),
        ..RelationalConfig::default()
    }
}

fn small_map(rng: &mut Rng) -> Tensor {
    let (h, w, d) = (2 + rng.below(7), 2 + rng.below(7), 1 + rng.below(6));
    let scale = rng.range(0.2, 2.0);
    random(rng, &[h, w, d], scale)
}

/// Worst deviation of each relational quantity from the brute-force
/// reference over `instances` seeded draws.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed, 11);
    let mut worst = [0.0f64; 9];
    for _ in 0..instances {
        let cfg = rel_cfg(&mut rng);
        let z = small_map(&mut rng);

        let s = local_affinity(&z, &cfg)?;
        let rows = oracles::affinity(&z, cfg.window, cfg.temperature);
        worst[0] = worst[0].max(diff(s.data(), &rows.concat()));
        worst[1] = worst[1].max(diff(entropy(&s)?.data(), &oracles::entropy(&rows)));
        worst[2] = worst[2].max(diff(spikiness(&z, cfg.eps)?.data(), &oracles::spikiness(&z, cfg.eps)));
        let com: Vec<f64> = oracles::com(&rows, cfg.window).iter().flat_map(|&(x, y)| [x, y]).collect();
        worst[3] = worst[3].max(diff(com_field(&s, &cfg)?.data(), &com));

        let (c, d) = (z.shape()[2], 1 + rng.below(8));
        let phi = Projection::seeded(c, d, rng.next_u64())?;
        worst[4] = worst[4].max(diff(project(&z, &phi)?.data(), oracles::project(&z, phi.matrix()).data()));

        // Consensus over 2 to 4 sources on one grid.
        let n = 2 + rng.below(3);
        let (h, w) = (z.shape()[0], z.shape()[1]);
        let maps: Vec<Tensor> = (0..n)
            .map(|_| {
                let scale = rng.range(0.3, 2.0);
                random(&mut rng, &[h, w, 4], scale)
            })
            .collect();
        let beta = rng.range(0.0, 30.0);
        let gamma = rng.range(0.3, 0.9);
        let fcfg = comfield_core::fusion::FusionConfig { beta, gamma, std_floor: 1e-8 };
        let core_fields = maps.iter().map(|m| relational_field(m, None, &cfg)).collect::<std::result::Result<Vec<_>, _>>()?;
        let cons = consensus_from_fields(&core_fields, &fcfg)?;
        let ofields: Vec<_> = maps.iter().map(|m| oracles::field(m, cfg.window, cfg.temperature, cfg.eps)).collect();
        let (idx, ocom) = oracles::consensus(&ofields, beta, gamma, 1e-8);
        let ocom: Vec<f64> = ocom.iter().flat_map(|&(x, y)| [x, y]).collect();
        let mut e = diff(cons.com.data(), &ocom);
        if cons.selected_index() != idx {
            e = f64::INFINITY;
        }
        worst[5] = worst[5].max(e);

        // Attention at ratio 1 to 4.
        let ratio = 1 + rng.below(4);
        let (lh, lw) = (1 + rng.below(4), 1 + rng.below(4));
        let dk = 1 + rng.below(6);
        let q = random(&mut rng, &[lh * ratio, lw * ratio, dk], 1.5);
        let k = random(&mut rng, &[lh, lw, dk], 1.5);
        let c_v = 1 + rng.below(5);
        let v = random(&mut rng, &[lh, lw, c_v], 1.0);
        let win = [1, 3, 5][rng.below(3)];
        let att = neighborhood_attention(&q, &k, &v, win)?;
        worst[6] = worst[6].max(diff(att.data(), oracles::attention(&q, &k, &v, win).data()));

        let a = random(&mut rng, z.shape(), 1.0);
        worst[7] = worst[7].max((loss_rec(&a, &z)? - oracles::loss_rec(&a, &z)).abs());
        let b_ens = Tensor::from_fn(&[h, w, 2], |_| rng.range(-1.0, 1.0));
        let b_hat = com_field(&local_affinity(&z, &cfg)?, &cfg)?;
        let got = loss_guide(&b_hat, &b_ens)?;
        worst[8] = worst[8].max((got - oracles::loss_guide(&z, &b_ens, cfg.window, cfg.temperature)).abs());
    }
    let names = ["affinity", "entropy", "spikiness", "com", "projection", "consensus", "attention", "loss_rec", "loss_guide"];
    Ok(names.iter().zip(worst).map(|(n, w)| check(&format!("oracle {n}"), w, ORACLE_TOLERANCE)).collect())
}

/// End-to-end forward pass against the composed reference.
pub fn upsample_oracle(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = Rng::new(seed, 12);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let cfg = tiny_config(1 + rng.below(3), [1, 3][rng.below(2)]);
        let params = UpsamplerParams::init(&cfg, &mut rng)?;
        let (lh, lw) = (2 + rng.below(3), 2 + rng.below(3));
        let image = Tensor::from_fn(&[lh * cfg.ratio, lw * cfg.ratio, 3], |_| rng.uniform());
        let f_lr = random(&mut rng, &[lh, lw, 4], 1.0);
        let got = upsample(&image, &f_lr, &params, &cfg)?;
        let want = oracles::upsample(&image, &f_lr, &params.tensors(), cfg.attention_window, cfg.ratio, cfg.rope_base);
        worst = worst.max(diff(got.data(), want.data()));
    }
    Ok(check("oracle upsample", worst, 1e-10))
}

/// Small encoder used by the gradient suite: `d = 8`, widths `(4, 4)`.
pub fn tiny_config(ratio: usize, window: usize) -> UpsamplerConfig {
    UpsamplerConfig {
        guidance_dim: 8,
        attention_window: window,
        ratio,
        rope_base: 100.0,
        kernel_sizes: vec![3, 3, 3],
        hidden_widths: vec![4, 4],
        init_bias: 0.5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Rec,
    Guide,
    Total,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Rec, Objective::Guide, Objective::Total];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Rec => "loss_rec",
            Objective::Guide => "loss_guide",
            Objective::Total => "loss_total",
        }
    }
}

/// Tape gradients against central differences for every upsampler
/// parameter on one 8×8 → 16×16 instance.
pub fn grad_instance(objective: Objective, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed, 13);
    let cfg = tiny_config(2, 3);
    let params = UpsamplerParams::init(&cfg, &mut rng)?;
    let image = Tensor::from_fn(&[16, 16, 3], |_| rng.uniform());
    let f_lr = random(&mut rng, &[8, 8, 4], 1.0);
    let f_hr = random(&mut rng, &[16, 16, 4], 1.0);
    let b_ens = Tensor::from_fn(&[16, 16, 2], |_| rng.range(-1.0, 1.0));
    let rel = RelationalConfig { window: 3, temperature: 2.0, ..RelationalConfig::default() };
    let lambda = 0.5;
    let pipeline = |tape: &mut Tape, ps: &[Var]| {
        let lr = tape.leaf(f_lr.clone());
        let pred = upsample_var(tape, &image, lr, ps, &cfg)?;
        match objective {
            Objective::Rec => loss_rec_var(tape, pred, &f_hr),
            Objective::Guide => loss_guide_var(tape, pred, &b_ens, &rel),
            Objective::Total => {
                let r = loss_rec_var(tape, pred, &f_hr)?;
                let g = loss_guide_var(tape, pred, &b_ens, &rel)?;
                let g = tape.scale(g, lambda);
                tape.add(r, g)
            }
        }
    };
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let gcfg = GradCheckConfig { step: 1e-5, tolerance: GRAD_TOLERANCE, floor: GRAD_FLOOR, max_entries: None };
    Ok(grad_check(pipeline, &tensors, &gcfg, &mut rng)?)
}

pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<Check>> {
    Objective::ALL
        .iter()
        .map(|&obj| {
            let mut worst = 0.0f64;
            for i in 0..instances as u64 {
                worst = worst.max(grad_instance(obj, seed.wrapping_add(i))?.max_rel_error());
            }
            Ok(check(&format!("gradient {}", obj.name()), worst, GRAD_TOLERANCE))
        })
        .collect()
}

fn bool_check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check { name: name.into(), passed, detail: detail.into() }
}

pub fn format_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed, 14);
    let mut out = Vec::new();

    let t = random(&mut rng, &[5, 7, 3], 1e3);
    let bytes = fmap::encode(&t).map_err(|e| HarnessError::config(e.to_string()))?;
    let back = fmap::decode(&bytes);
    let bit_exact = matches!(&back, Ok(b) if b.shape() == t.shape()
        && b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    out.push(bool_check("fmap round trip", bit_exact, format!("{} bytes", bytes.len())));
    let truncated = fmap::decode(&bytes[..bytes.len() - 1]);
    out.push(bool_check(
        "fmap truncation",
        matches!(truncated, Err(fmap::FmapError::Truncated { .. })),
        format!("{truncated:?}").chars().take(60).collect::<String>(),
    ));
    let empty = fmap::encode(&Tensor::zeros(&[0, 0, 0])).ok().and_then(|b| fmap::decode(&b).ok());
    out.push(bool_check("fmap empty map", matches!(&empty, Some(e) if e.shape() == [0, 0, 0]), "H = W = C = 0"));

    let cfg = tiny_config(2, 3);
    let params = UpsamplerParams::init(&cfg, &mut rng)?;
    let back = checkpoint::decode(&checkpoint::encode(&cfg, &params));
    out.push(bool_check(
        "checkpoint round trip",
        matches!(&back, Ok((c, p)) if *c == cfg && *p == params),
        format!("{} parameters", params.param_count()),
    ));

    let raster = pnm::Raster { width: 4, height: 3, channels: 3, data: (0..36).map(|_| rng.below(256) as u8).collect() };
    let back = pnm::decode(&pnm::encode(&raster));
    out.push(bool_check("ppm round trip", back.as_ref() == Ok(&raster), "4×3×3"));
    Ok(out)
}

/// Everything `comfield selftest` runs, at the sizes it runs them.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut checks = oracle_suite(100, seed)?;
    checks.push(upsample_oracle(20, seed)?);
    checks.extend(gradient_suite(10, seed)?);
    checks.extend(format_suite(seed)?);
    Ok(checks)
}
