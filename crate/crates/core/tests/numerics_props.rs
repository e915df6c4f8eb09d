use comfield_core::evalkit::{cross_entropy_var, depth_from_scores_var, depth_loss_var, linear_var};
use comfield_core::numerics::resample::{downsample_box, resize_bilinear};
use comfield_core::numerics::tape::silu;
use comfield_core::numerics::{elementwise, grad_check, matmul, reduce, softmax, ElementwiseOp, GradCheckConfig, ReduceOp};
use comfield_core::training::{loss_guide_var, loss_rec_var};
use comfield_core::upsampler::{conv2d_var, neighborhood_attention_var, pool_keys_var, rope2d_var, upsample_var, UpsamplerConfig, UpsamplerParams};
use comfield_core::relational::RelationalConfig;
use comfield_core::{Error, Rng, Tensor};
use proptest::prelude::*;

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..5)
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    shape_strategy().prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-50.0f64..50.0, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn index_round_trip(shape in shape_strategy(), pick in any::<prop::sample::Index>()) {
        let t = Tensor::zeros(&shape);
        let i = pick.index(t.len());
        let coords = t.coords(i);
        prop_assert!(coords.iter().zip(&shape).all(|(c, n)| c < n));
        prop_assert_eq!(t.offset(&coords), i);
    }

    #[test]
    fn softmax_is_a_distribution(t in tensor_strategy(), axis_pick in any::<prop::sample::Index>(), shift in -100.0f64..100.0) {
        let axis = axis_pick.index(t.rank());
        let p = softmax(&t, axis, None).unwrap();
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        let sums = reduce(ReduceOp::Sum, &p, &[axis]).unwrap();
        prop_assert!(sums.data().iter().all(|&s| (s - 1.0).abs() <= 1e-12));
        let moved = softmax(&t.map(|v| v + shift), axis, None).unwrap();
        prop_assert!(p.max_abs_diff(&moved) <= 1e-12);
    }

    #[test]
    fn masked_entries_are_exact_zeros(t in tensor_strategy(), bits in prop::collection::vec(any::<bool>(), 256)) {
        let last = t.rank() - 1;
        let n = t.shape()[last];
        let mut mask: Vec<bool> = (0..t.len()).map(|i| bits[i % 256]).collect();
        // Keep one entry per row alive.
        for row in mask.chunks_mut(n) {
            row[0] = true;
        }
        let p = softmax(&t, last, Some(&mask)).unwrap();
        for (row, m) in p.data().chunks(n).zip(mask.chunks(n)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().zip(m).all(|(&v, &keep)| keep || v == 0.0));
        }
    }

    #[test]
    fn sum_reduction_matches_brute_force(t in tensor_strategy(), axis_pick in any::<prop::sample::Index>()) {
        let axis = axis_pick.index(t.rank());
        let r = reduce(ReduceOp::Sum, &t, &[axis]).unwrap();
        let mut want = vec![0.0; r.len()];
        for i in 0..t.len() {
            let mut c = t.coords(i);
            c.remove(axis);
            let mut off = 0;
            for (d, &k) in c.iter().enumerate() {
                off = off * r.shape()[d] + k;
            }
            want[off] += t.data()[i];
        }
        for (a, b) in r.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn reduce_examples() {
    let t = Tensor::new(&[2, 3], vec![1.0, -4.0, 2.0, 3.0, 0.5, -1.0]).unwrap();
    assert_eq!(reduce(ReduceOp::Sum, &t, &[0]).unwrap().data(), &[4.0, -3.5, 1.0]);
    assert_eq!(reduce(ReduceOp::Mean, &t, &[1]).unwrap().data(), &[-1.0 / 3.0, 2.5 / 3.0]);
    assert_eq!(reduce(ReduceOp::Max, &t, &[0, 1]).unwrap().item(), 3.0);
    assert_eq!(reduce(ReduceOp::LinfNorm, &t, &[1]).unwrap().data(), &[4.0, 3.0]);
    assert_eq!(reduce(ReduceOp::L2Norm, &t, &[1]).unwrap().data()[0], 21f64.sqrt());
    assert!(matches!(reduce(ReduceOp::Sum, &t, &[2]), Err(Error::Shape(_))));
}

#[test]
fn elementwise_examples_and_errors() {
    let a = Tensor::new(&[4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap();
    let clip = elementwise(ElementwiseOp::Clip { lo: -1.0, hi: 1.0 }, &a, None).unwrap();
    assert_eq!(clip.data(), &[-1.0, -0.5, 0.5, 1.0]);
    assert_eq!(elementwise(ElementwiseOp::Relu, &a, None).unwrap().data(), &[0.0, 0.0, 0.5, 3.0]);
    let zero = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    assert!(matches!(elementwise(ElementwiseOp::Div, &a, Some(&zero)), Err(Error::DivisionByZero)));
    assert!(matches!(elementwise(ElementwiseOp::Log, &a, None), Err(Error::LogNonPositive(_))));
    assert!(elementwise(ElementwiseOp::Clip { lo: 1.0, hi: -1.0 }, &a, None).is_err());
    let all_masked = softmax(&a, 0, Some(&[false; 4]));
    assert!(matches!(all_masked, Err(Error::AllMasked)));
}

#[test]
fn matmul_example() {
    let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn resampling_examples() {
    let f = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    assert_eq!(downsample_box(&f, 2).unwrap().data(), &[1.5]);
    let up = resize_bilinear(&f, 4, 4).unwrap();
    assert_eq!(up.get(&[0, 0, 0]), 0.0);
    assert_eq!(up.get(&[3, 3, 0]), 3.0);
    // Clamped sample positions are symmetric, so the mean of a ramp survives.
    assert!((up.sum() / 16.0 - 1.5).abs() < 1e-12);
}

#[test]
fn rng_streams_are_reproducible_and_distinct() {
    let draw = |seed, stream| {
        let mut r = Rng::new(seed, stream);
        (0..64).map(|_| r.next_u64()).collect::<Vec<_>>()
    };
    assert_eq!(draw(5, 1), draw(5, 1));
    assert_ne!(draw(5, 1), draw(5, 2));
    assert_ne!(draw(5, 1), draw(6, 1));
    let root = Rng::new(9, 0);
    let (mut a, mut b) = (root.split(3), root.split(3));
    assert_eq!(a.next_u64(), b.next_u64());
    let mut r = Rng::new(1, 0);
    let n = 20_000;
    let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.05, "mean {mean} var {var}");
    assert!((0..1000).all(|_| r.below(7) < 7));
}

fn randn(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

fn assert_checks(name: &str, seeds: u64, mut build: impl FnMut(&mut Rng) -> comfield_core::Result<comfield_core::numerics::GradCheckReport>) {
    for seed in 0..seeds {
        let mut rng = Rng::new(seed, 77);
        let report = build(&mut rng).unwrap();
        assert!(report.passed, "{name} seed {seed}: max rel {}", report.max_rel_error());
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    let cfg = GradCheckConfig::default();
    assert_checks("conv", 50, |rng| {
        let params = [randn(rng, &[4, 5, 2], 1.0), randn(rng, &[3, 3, 2, 3], 0.5), randn(rng, &[3], 0.5)];
        grad_check(
            |t, v| {
                let y = conv2d_var(t, v[0], v[1], v[2])?;
                let y = silu(t, y);
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &params,
            &cfg,
            rng,
        )
    });
    assert_checks("attention", 50, |rng| {
        let params = [randn(rng, &[6, 4, 4], 1.0), randn(rng, &[3, 2, 4], 1.0), randn(rng, &[3, 2, 3], 1.0)];
        grad_check(
            |t, v| {
                let y = neighborhood_attention_var(t, v[0], v[1], v[2], 3)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &params,
            &cfg,
            rng,
        )
    });
    assert_checks("rope+pool", 50, |rng| {
        let params = [randn(rng, &[4, 6, 8], 1.0)];
        grad_check(
            |t, v| {
                let r = rope2d_var(t, v[0], 100.0, 2.0)?;
                let p = pool_keys_var(t, r, 2)?;
                let sq = t.mul(p, p)?;
                let s = t.mul(sq, p)?;
                t.sum_all(s)
            },
            &params,
            &cfg,
            rng,
        )
    });
    assert_checks("probe heads", 50, |rng| {
        let x = randn(rng, &[8, 3], 1.0);
        let labels: Vec<u8> = (0..8).map(|_| rng.below(4) as u8).collect();
        let bins: Vec<f64> = (0..5).map(|i| 1.0 + i as f64).collect();
        let gt: Vec<f64> = (0..8).map(|_| rng.range(1.0, 5.0)).collect();
        let params = [randn(rng, &[4, 3], 0.5), randn(rng, &[5, 3], 0.5)];
        grad_check(
            |t, v| {
                let logits = linear_var(t, &x, v[0])?;
                let ce = cross_entropy_var(t, logits, &labels)?;
                let scores = linear_var(t, &x, v[1])?;
                let d = depth_from_scores_var(t, scores, &bins)?;
                let dl = depth_loss_var(t, d, &gt, 2)?;
                t.add(ce, dl)
            },
            &params,
            &cfg,
            rng,
        )
    });
}

#[test]
fn guidance_loss_gradient_on_small_grid() {
    let rel = RelationalConfig { window: 3, temperature: 1.0, ..RelationalConfig::default() };
    assert_checks("loss_guide 4×4", 50, |rng| {
        let b_ens = Tensor::from_fn(&[4, 4, 2], |_| rng.range(-1.0, 1.0));
        let params = [randn(rng, &[4, 4, 3], 1.0)];
        grad_check(|t, v| loss_guide_var(t, v[0], &b_ens, &rel), &params, &GradCheckConfig::default(), rng)
    });
}

#[test]
fn toy_upsampler_gradient() {
    let cfg = UpsamplerConfig {
        guidance_dim: 4,
        attention_window: 3,
        ratio: 2,
        kernel_sizes: vec![3, 3],
        hidden_widths: vec![3],
        ..UpsamplerConfig::default()
    };
    assert_checks("toy upsampler", 50, |rng| {
        let image = Tensor::from_fn(&[8, 8, 3], |_| rng.uniform());
        let f_lr = randn(rng, &[4, 4, 2], 1.0);
        let target = randn(rng, &[8, 8, 2], 1.0);
        let init = UpsamplerParams::init(&cfg, rng)?;
        let mut params = vec![f_lr];
        params.extend(init.tensors().into_iter().cloned());
        grad_check(
            |t, v| {
                let out = upsample_var(t, &image, v[0], &v[1..], &cfg)?;
                loss_rec_var(t, out, &target)
            },
            &params,
            &GradCheckConfig { floor: 1e-5, ..GradCheckConfig::default() },
            rng,
        )
    });
}
