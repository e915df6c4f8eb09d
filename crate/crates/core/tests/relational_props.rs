use comfield_core::numerics::{grad_check, GradCheckConfig};
use comfield_core::relational::{com_field, com_field_var, entropy, local_affinity, project, relational_field, spikiness, Projection, RelationalConfig};
use comfield_core::{Rng, Tensor};
use proptest::prelude::*;

fn map_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..7, 1usize..7, 1usize..6).prop_flat_map(|(h, w, d)| {
        prop::collection::vec(-3.0f64..3.0, h * w * d).prop_map(move |v| Tensor::new(&[h, w, d], v).unwrap())
    })
}

/// Per-pixel norms below 1, so logits at τ = 1e6 stay below 1e-6.
fn unit_map_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..7, 1usize..7, 1usize..6).prop_flat_map(|(h, w, d)| {
        prop::collection::vec(-0.3f64..0.3, h * w * d).prop_map(move |v| Tensor::new(&[h, w, d], v).unwrap())
    })
}

fn cfg_strategy() -> impl Strategy<Value = RelationalConfig> {
    (prop::sample::select(vec![1usize, 3, 5, 7]), 0.1f64..10.0)
        .prop_map(|(window, temperature)| RelationalConfig { window, temperature, ..RelationalConfig::default() })
}

fn mirror(t: &Tensor) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(&[h, w, c], |i| {
        let (p, k) = (i / c, i % c);
        let (y, x) = (p / w, p % w);
        t.data()[(y * w + (w - 1 - x)) * c + k]
    })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rows_normalized_and_fields_bounded(z in map_strategy(), cfg in cfg_strategy()) {
        let s = local_affinity(&z, &cfg).unwrap();
        let n = cfg.window * cfg.window;
        for row in s.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        let f = relational_field(&z, None, &cfg).unwrap();
        let hmax = (n as f64).ln();
        prop_assert!(f.entropy.data().iter().all(|&h| h >= 0.0 && h <= hmax + 1e-12));
        prop_assert!(f.spikiness.data().iter().all(|&k| (0.0..1.0).contains(&k)));
        prop_assert!(f.com.data().iter().all(|&b| (-1.0..=1.0).contains(&b)));
    }

    #[test]
    fn spikiness_lower_bound(z in map_strategy()) {
        let d = z.shape()[2] as f64;
        let eps = 1e-6;
        let k = spikiness(&z, eps).unwrap();
        for (p, v) in z.data().chunks(z.shape()[2]).enumerate() {
            let l2 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if l2 > 0.0 {
                prop_assert!(l2 / (d.sqrt() * (l2 + eps)) <= k.data()[p] + 1e-15);
            }
        }
    }

    #[test]
    fn left_right_mirror(z in map_strategy(), cfg in cfg_strategy()) {
        let a = relational_field(&z, None, &cfg).unwrap();
        let b = relational_field(&mirror(&z), None, &cfg).unwrap();
        let (h, w) = (z.shape()[0], z.shape()[1]);
        let m1 = |t: &Tensor| mirror(&t.clone().reshape(&[h, w, 1]).unwrap());
        prop_assert!(max_diff(m1(&a.entropy).data(), b.entropy.data()) <= 1e-12);
        prop_assert!(max_diff(m1(&a.spikiness).data(), b.spikiness.data()) <= 1e-12);
        let flipped = mirror(&a.com);
        for (p, q) in flipped.data().chunks(2).zip(b.com.data().chunks(2)) {
            prop_assert!((p[0] + q[0]).abs() <= 1e-12);
            prop_assert!((p[1] - q[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn temperature_limit(z in unit_map_strategy(), window in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let cfg = RelationalConfig { window, temperature: 1e6, ..RelationalConfig::default() };
        let n = window * window;
        let s = local_affinity(&z, &cfg).unwrap();
        prop_assert!(s.data().iter().all(|&p| (p - 1.0 / n as f64).abs() <= 1e-6));
        let h = entropy(&s).unwrap();
        prop_assert!(h.data().iter().all(|&v| (v - (n as f64).ln()).abs() <= 1e-6));
        let b = com_field(&s, &cfg).unwrap();
        prop_assert!(b.data().iter().all(|&v| v.abs() <= 1e-6));
    }
}

#[test]
fn constant_map_gives_uniform_field() {
    let z = Tensor::full(&[5, 6, 3], 0.7);
    for window in [3, 7] {
        let cfg = RelationalConfig { window, ..RelationalConfig::default() };
        let f = relational_field(&z, None, &cfg).unwrap();
        let ln = ((window * window) as f64).ln();
        assert!(f.entropy.data().iter().all(|&h| (h - ln).abs() < 1e-12));
        assert!(f.com.data().iter().all(|&b| b.abs() < 1e-15));
        let k0 = f.spikiness.data()[0];
        assert!(f.spikiness.data().iter().all(|&k| k == k0));
    }
}

#[test]
fn checkerboard_entropy_below_uniform() {
    let z = Tensor::from_fn(&[6, 6, 2], |i| {
        let (p, c) = (i / 2, i % 2);
        let on = ((p / 6) + (p % 6)) % 2;
        if c == on { 2.0 } else { 0.0 }
    });
    let cfg = RelationalConfig { window: 3, temperature: 1.0, ..RelationalConfig::default() };
    let f = relational_field(&z, None, &cfg).unwrap();
    assert!(f.entropy.data().iter().all(|&h| h < 9f64.ln() - 1e-3));
}

#[test]
fn vertical_boundary_points_into_the_region() {
    // Left half (0,1), right half (1,0); columns 3 and 4 border each other.
    let (h, w) = (6, 8);
    let z = Tensor::from_fn(&[h, w, 2], |i| {
        let (p, c) = (i / 2, i % 2);
        let right = (p % w) >= w / 2;
        if (c == 0) == right { 1.5 } else { 0.0 }
    });
    let cfg = RelationalConfig { window: 3, temperature: 0.5, ..RelationalConfig::default() };
    let b = relational_field(&z, None, &cfg).unwrap().com;
    for y in 0..h {
        let left = b.get(&[y, w / 2 - 1, 0]);
        let right = b.get(&[y, w / 2, 0]);
        assert!(left < -0.1, "left boundary column should point left, got {left}");
        assert!(right > 0.1, "right boundary column should point right, got {right}");
        assert!(b.get(&[y, w / 2 - 1, 1]).abs() < 1e-15);
    }
}

#[test]
fn projection_matches_per_pixel_matmul() {
    let mut rng = Rng::new(4, 0);
    let f = Tensor::from_fn(&[4, 4, 6], |_| rng.normal());
    let phi = Projection::seeded(6, 3, 99).unwrap();
    let z = project(&f, &phi).unwrap();
    for p in 0..16 {
        for j in 0..3 {
            let want: f64 = (0..6).map(|c| f.data()[p * 6 + c] * phi.matrix().get(&[c, j])).sum();
            assert!((z.data()[p * 3 + j] - want).abs() < 1e-12);
        }
    }
    // Columns are orthonormal when C ≥ d.
    for a in 0..3 {
        for b in 0..3 {
            let dot: f64 = (0..6).map(|c| phi.matrix().get(&[c, a]) * phi.matrix().get(&[c, b])).sum();
            assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
    }
}

#[test]
fn mean_com_is_differentiable() {
    let cfg = RelationalConfig { window: 3, temperature: 1.5, ..RelationalConfig::default() };
    for seed in 0..5 {
        let mut rng = Rng::new(seed, 3);
        let f = Tensor::from_fn(&[4, 5, 3], |_| rng.normal());
        let report = grad_check(
            |tape, v| {
                let b = com_field_var(tape, v[0], &cfg)?;
                tape.mean_all(b)
            },
            &[f],
            &GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {:?}", report.params);
    }
}
