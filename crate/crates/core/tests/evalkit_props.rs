use comfield_core::evalkit::{bin_probabilities, delta1, depth_bins, depth_from_scores, miou, probe_depth, probe_seg, ProbeConfig};
use comfield_core::lab::{self, run_ablation, LabConfig, Method, Suite};
use comfield_core::synthworld::{LabelMap, SceneConfig, SyntheticVfm};
use comfield_core::upsampler::UpsamplerConfig;
use comfield_core::{Rng, Tensor};
use proptest::prelude::*;

/// Independent confusion-count IoU: per class, |pred ∩ gt| / |pred ∪ gt|.
fn iou_oracle(pred: &[u8], gt: &[u8], classes: usize) -> (Vec<Option<f64>>, f64, f64) {
    let per: Vec<Option<f64>> = (0..classes as u8)
        .map(|c| {
            let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
            let union = pred.iter().zip(gt).filter(|(&p, &g)| p == c || g == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let m = present.iter().sum::<f64>() / present.len() as f64;
    let acc = pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64;
    (per, m, acc)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn miou_matches_oracle(
        classes in 2usize..7,
        (h, w) in (1usize..9, 1usize..9),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed, 0);
        let pred: Vec<u8> = (0..h * w).map(|_| rng.below(classes) as u8).collect();
        let gt: Vec<u8> = (0..h * w).map(|_| rng.below(classes) as u8).collect();
        let m = miou(&LabelMap::new(h, w, pred.clone()).unwrap(), &LabelMap::new(h, w, gt.clone()).unwrap(), classes).unwrap();
        let (per, mean, acc) = iou_oracle(&pred, &gt, classes);
        prop_assert_eq!(m.per_class_iou, per);
        prop_assert_eq!(m.miou, mean);
        prop_assert_eq!(m.accuracy, acc);
        prop_assert!((0.0..=1.0).contains(&m.miou));
    }

    #[test]
    fn delta1_matches_oracle(n in 1usize..64, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 1);
        let gt: Vec<f64> = (0..n).map(|_| rng.range(0.5, 4.5)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.range(0.6, 1.6)).collect();
        let hits = pred.iter().zip(&gt).filter(|(&p, &g)| p / g < 1.25 && g / p < 1.25).count();
        prop_assert_eq!(delta1(&pred, &gt).unwrap(), hits as f64 / n as f64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn bin_probabilities_form_a_simplex(rows in 1usize..5, bins in 1usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 2);
        let s = Tensor::from_fn(&[rows, bins], |_| 5.0 * rng.normal());
        let p = bin_probabilities(&s).unwrap();
        for row in p.data().chunks(bins) {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let centers: Vec<f64> = (0..bins).map(|i| 1.0 + i as f64).collect();
        let d = depth_from_scores(&s, &centers).unwrap();
        for (dv, row) in d.data().iter().zip(p.data().chunks(bins)) {
            let want: f64 = row.iter().zip(&centers).map(|(a, b)| a * b).sum();
            prop_assert!((dv - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn metric_examples() {
    let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
    let zeros = LabelMap::filled(1, 4, 0);
    let m = miou(&zeros, &gt, 2).unwrap();
    assert_eq!(m.per_class_iou, vec![Some(0.5), Some(0.0)]);
    assert_eq!(m.miou, 0.25);
    let g = [1.0, 2.0, 3.0];
    assert_eq!(delta1(&g, &g).unwrap(), 1.0);
    assert_eq!(delta1(&g.map(|v| v * 1.3), &g).unwrap(), 0.0);
    assert_eq!(delta1(&g.map(|v| v * 1.2), &g).unwrap(), 1.0);
    assert!(delta1(&[0.0], &[1.0]).is_err());
}

#[test]
fn separable_features_train_an_accurate_probe() {
    let mut rng = Rng::new(3, 0);
    let (h, w) = (12, 12);
    let labels = LabelMap::new(h, w, (0..h * w).map(|i| ((i % w) >= w / 2) as u8).collect()).unwrap();
    let f = Tensor::from_fn(&[h, w, 3], |i| {
        let (p, c) = (i / 3, i % 3);
        let sign = if labels.data[p] == 1 { 1.0 } else { -1.0 };
        if c == 0 { sign * (1.0 + rng.uniform()) } else { rng.normal() }
    });
    let cfg = ProbeConfig { iterations: 200, ..ProbeConfig::default() };
    let probe = probe_seg(&[&f], &[&labels], 2, &cfg).unwrap();
    let acc = miou(&probe.predict(&f).unwrap(), &labels, 2).unwrap().accuracy;
    assert!(acc > 0.99, "accuracy {acc}");
    assert_eq!(probe, probe_seg(&[&f], &[&labels], 2, &cfg).unwrap());
    assert!(probe.absent_classes.is_empty());

    let untrained = probe_seg(&[&f], &[&labels], 3, &ProbeConfig { iterations: 0, ..cfg.clone() }).unwrap();
    let mut init_rng = Rng::new(cfg.seed, 0x5e9);
    assert_eq!(untrained.weight, Tensor::from_fn(&[3, 3], |_| init_rng.normal() * 0.01));
    assert_eq!(untrained.absent_classes, vec![2]);
}

#[test]
fn constant_depth_scene_is_learned() {
    let mut rng = Rng::new(4, 0);
    let f = Tensor::from_fn(&[16, 16, 4], |_| rng.normal());
    let depth = Tensor::full(&[16, 16, 1], 2.0);
    let probe = probe_depth(&[&f], &[&depth], &ProbeConfig::default()).unwrap();
    let pred = probe.predict(&f).unwrap();
    let d1 = delta1(pred.data(), depth.data()).unwrap();
    assert!(d1 > 0.99, "δ1 {d1}");
    assert!(probe_depth(&[&f], &[&depth.map(|_| 0.0)], &ProbeConfig::default()).is_err());
}

#[test]
fn depth_head_extremes() {
    let bins = depth_bins((0.5, 4.5));
    assert_eq!(bins.len(), 256);
    let uniform = depth_from_scores(&Tensor::zeros(&[1, 256]), &bins).unwrap().item();
    assert!((uniform - bins.iter().sum::<f64>() / 256.0).abs() < 1e-12);
    // A dominant score leaves the 0.1 floor on the others; push it far enough.
    let mut s = Tensor::zeros(&[1, 256]);
    s.data_mut()[40] = 1e15;
    assert!((depth_from_scores(&s, &bins).unwrap().item() - bins[40]).abs() < 1e-9);
}

fn tiny_lab() -> LabConfig {
    let mut cfg = LabConfig {
        scene: SceneConfig { size: 32, min_radius: 5.0, max_radius: 10.0, ..SceneConfig::default() },
        train_scenes: 2,
        eval_scenes: 2,
        upsampler: UpsamplerConfig { guidance_dim: 8, kernel_sizes: vec![3, 3], hidden_widths: vec![8], ..UpsamplerConfig::default() },
        ..LabConfig::default()
    };
    cfg.train.iterations = 2;
    cfg.train.crop = 16;
    cfg.probe.iterations = 5;
    cfg
}

fn checksum(ts: &[&Tensor]) -> u64 {
    ts.iter().flat_map(|t| t.data()).fold(0xcbf2_9ce4_8422_2325, |h, v| (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3))
}

#[test]
fn probing_leaves_the_upsampler_untouched() {
    let cfg = tiny_lab();
    let artifacts = lab::run(&cfg, 0).unwrap();
    let params = artifacts.params.unwrap();
    let before = checksum(&params.tensors());
    let eval = lab::scenes(&cfg.scene, 0, cfg.eval_scenes, true).unwrap();
    let feats = lab::upsample_scenes(&eval, &cfg.train.sources[0], Some(&params), &cfg).unwrap();
    let report = lab::evaluate(&feats, &eval, &cfg, 0).unwrap();
    assert_eq!(checksum(&params.tensors()), before);
    assert_eq!(report.miou, artifacts.report.miou);
    assert_eq!(report.delta1, artifacts.report.delta1);
    for v in [report.miou, report.accuracy, report.delta1] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn ablation_suites_have_the_documented_shape() {
    let mut single = tiny_lab();
    single.guidance = vec![SyntheticVfm::clean(100, 2, 8)];
    let t = run_ablation(Suite::GuidancePanel, &single, &[0]).unwrap();
    let names: Vec<&str> = t.rows.iter().map(|r| r.config.as_str()).collect();
    assert_eq!(names, ["none", "all"]);
    assert!(t.rows.iter().all(|r| r.report.is_some()));

    let mut corrupted = LabConfig::corrupted_panel();
    let tiny = tiny_lab();
    corrupted.scene = tiny.scene.clone();
    corrupted.train_scenes = 2;
    corrupted.eval_scenes = 2;
    corrupted.upsampler = tiny.upsampler.clone();
    corrupted.train.iterations = 2;
    corrupted.train.crop = 16;
    corrupted.probe.iterations = 5;
    let t = run_ablation(Suite::FusionStrategy, &corrupted, &[0, 1]).unwrap();
    let pairs: Vec<(&str, u64)> = t.rows.iter().map(|r| (r.config.as_str(), r.seed)).collect();
    assert_eq!(pairs, [("mean", 0), ("mean", 1), ("select", 0), ("select", 1)]);
    assert_eq!(t.summaries().len(), 2);

    let t = run_ablation(Suite::WindowSweep, &tiny_lab(), &[0]).unwrap();
    let names: Vec<String> = t.summaries().into_iter().map(|s| s.config).collect();
    assert_eq!(names, ["w3", "w5", "w7", "w9"]);
    assert!(t.summaries().iter().all(|s| s.runs == 1 && s.excluded == 0));

    let t = run_ablation(Suite::BilinearBaseline, &tiny_lab(), &[0]).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert_eq!(Suite::BilinearBaseline.configs(&tiny_lab())[0].1.method, Method::Bilinear);
}

#[test]
fn diverged_runs_are_flagged_and_excluded() {
    let mut cfg = tiny_lab();
    cfg.train.learning_rate = 1e300;
    cfg.train.iterations = 20;
    let t = run_ablation(Suite::BilinearBaseline, &cfg, &[0]).unwrap();
    let s = t.summary("learned").unwrap();
    assert_eq!((s.runs, s.excluded), (0, 1));
    assert!(t.rows.iter().any(|r| r.error.as_deref().is_some_and(|e| e.contains("diverge"))));
    assert_eq!(t.summary("bilinear").unwrap().runs, 1);
}

#[test]
fn reports_are_deterministic() {
    let cfg = tiny_lab();
    let a = lab::run(&cfg, 3).unwrap();
    let b = lab::run(&cfg, 3).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.params, b.params);
}
