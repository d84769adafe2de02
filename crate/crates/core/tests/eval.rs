use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tobo_core::eval::{
    build_probe_dataset, dense_features, eval_probe, miou, propagate, r_squared, run_propagation, sweep, train_probe,
    write_sweep_csv, ContextQueue, FeatureGrid, ProbeConfig, ProbeSample, PropagationGrid, PropagationParams,
    SoftLabels,
};
use tobo_core::imaging::Image;
use tobo_core::objective::{squeeze, DecoderConfig, Model, Objective};
use tobo_core::rng::{substream, Stream};
use tobo_core::scene::{Episode, LabelMap, SceneConfig};
use tobo_core::tensor::ParamStore;
use tobo_core::vit::EncoderConfig;

fn encoder(cfg: EncoderConfig, seed: u64) -> (Model, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let m = Model::new(
        Objective::Tobo,
        cfg,
        &DecoderConfig::tiny(),
        &mut store,
        &mut substream(seed, Stream::Weights, 0),
    )
    .unwrap();
    (m, store)
}

fn tiny_scene() -> SceneConfig {
    SceneConfig {
        size: 16,
        radius: [2.0, 3.0],
        frames: 24,
        ..SceneConfig::default()
    }
}

fn grid(rows: usize, cols: usize, dim: usize, rng: &mut ChaCha8Rng) -> FeatureGrid {
    FeatureGrid::from_tokens(
        rows,
        cols,
        dim,
        (0..rows * cols * dim).map(|_| rng.random::<f64>() - 0.5).collect(),
    )
    .unwrap()
}

fn cell_labels(rows: usize, cols: usize) -> SoftLabels {
    let data = (0..rows * cols).map(|i| i as u16).collect();
    SoftLabels::from_labels(&LabelMap::new(rows, cols, data).unwrap(), 1, rows * cols).unwrap()
}

#[test]
fn dense_features_match_a_direct_encode() {
    let cfg = EncoderConfig::tiny();
    let (m, store) = encoder(cfg.clone(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Image::new(16, 16, (0..768).map(|_| rng.random()).collect()).unwrap();
    let f = dense_features(m.encoder(), &store, &img).unwrap();
    assert_eq!((f.rows, f.cols, f.dim), (4, 4, 16));
    let direct = squeeze(m.encoder(), &store, &img).unwrap().spatial;
    for i in 0..4 {
        for j in 0..4 {
            let row = direct.row(i * 4 + j);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cell = f.cell(i, j);
            assert!((cell.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
            for (a, b) in cell.iter().zip(row) {
                assert!((a - b / norm).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn identical_frame_copies_its_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = grid(4, 4, 8, &mut rng);
    let labels = cell_labels(4, 4);
    let q = ContextQueue::new(f.clone(), labels.clone(), 0).unwrap();
    let params = PropagationParams {
        k: 1,
        radius: None,
        ..PropagationParams::default()
    };
    assert_eq!(propagate(&q, &f, &params).unwrap(), labels);

    // Radius 0 leaves only the own location, whatever the features.
    let other = grid(4, 4, 8, &mut rng);
    let zero = PropagationParams {
        k: 3,
        radius: Some(0),
        ..PropagationParams::default()
    };
    assert_eq!(propagate(&q, &other, &zero).unwrap(), labels);
}

#[test]
fn two_by_two_blend_matches_hand_softmax() {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let src = FeatureGrid::from_tokens(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, s, s, -1.0, 0.0]).unwrap();
    let cur = FeatureGrid::from_tokens(2, 2, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
    let labels = cell_labels(2, 2);
    let q = ContextQueue::new(src, labels, 0).unwrap();
    let tau = 0.5;
    let out = propagate(
        &q,
        &cur,
        &PropagationParams {
            k: 2,
            radius: None,
            tau,
            m: 0,
        },
    )
    .unwrap();
    // Target (0,0) = e1: similarities to sources 1, 0, s, -1; top two are
    // cells 0 (1.0) and 2 (s).
    let w0 = 1.0 / (1.0 + ((s - 1.0) / tau).exp());
    let expected = [w0, 0.0, 1.0 - w0, 0.0];
    for (a, b) in out.cell(0, 0).iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    // Target (1,1) = -e2: similarities 0, -1, -s, 0; the tie keeps cells 0
    // and 3 at equal weight.
    let expected = [0.5, 0.0, 0.0, 0.5];
    for (a, b) in out.cell(1, 1).iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn propagated_labels_are_convex_and_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, cols) = (5, 5);
    let labels = cell_labels(rows, cols);
    let mut q = ContextQueue::new(grid(rows, cols, 6, &mut rng), labels.clone(), 2).unwrap();
    q.push(grid(rows, cols, 6, &mut rng), labels.clone()).unwrap();
    let cur = grid(rows, cols, 6, &mut rng);
    let support = |radius: Option<usize>| {
        let out = propagate(
            &q,
            &cur,
            &PropagationParams {
                k: 1000,
                radius,
                tau: 1.0,
                m: 2,
            },
        )
        .unwrap();
        let mut sets = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                let c = out.cell(i, j);
                assert!(c.iter().all(|&v| v >= 0.0));
                assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                sets.push(
                    c.iter()
                        .enumerate()
                        .filter(|(_, &v)| v > 0.0)
                        .map(|(k, _)| k)
                        .collect::<BTreeSet<_>>(),
                );
            }
        }
        sets
    };
    let wide = support(None);
    for r in [0, 1, 2] {
        let narrow = support(Some(r));
        for (i, (n, w)) in narrow.iter().zip(&wide).enumerate() {
            assert!(n.is_subset(w));
            let (ci, cj) = (i / cols, i % cols);
            for &k in n {
                let (a, b) = (k / cols, k % cols);
                assert!(ci.abs_diff(a).max(cj.abs_diff(b)) <= r);
            }
        }
    }
}

#[test]
fn queue_keeps_first_frame_and_m_recent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let first = grid(2, 2, 3, &mut rng);
    let mut q = ContextQueue::new(first.clone(), cell_labels(2, 2), 2).unwrap();
    let pushed: Vec<FeatureGrid> = (0..5).map(|_| grid(2, 2, 3, &mut rng)).collect();
    for f in &pushed {
        q.push(f.clone(), cell_labels(2, 2)).unwrap();
        assert!(q.len() <= 3);
    }
    let kept: Vec<&FeatureGrid> = q.entries().map(|(f, _)| f).collect();
    assert_eq!(kept, vec![&first, &pushed[3], &pushed[4]]);

    let mut only_first = ContextQueue::new(first.clone(), cell_labels(2, 2), 0).unwrap();
    only_first.push(pushed[0].clone(), cell_labels(2, 2)).unwrap();
    assert_eq!(only_first.len(), 1);
}

#[test]
fn miou_arithmetic() {
    let map = |v: Vec<u16>| LabelMap::new(1, v.len(), v).unwrap();
    let gt = map(vec![1, 1, 0, 0]);
    assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
    assert_eq!(miou(&map(vec![1, 1, 1, 1]), &map(vec![2, 2, 2, 2])).unwrap(), 0.0);
    assert!((miou(&map(vec![0, 1, 1, 0]), &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(miou(&gt, &map(vec![0, 0])).is_err());
}

#[test]
fn static_scene_propagates_almost_perfectly() {
    let cfg = EncoderConfig::tiny();
    let (m, store) = encoder(cfg, 5);
    let scene = tiny_scene().static_scene();
    // Nearest-neighbour voting: every frame's own cell in the pinned first
    // frame is an exact match, so only the label plumbing is under test.
    let nearest = PropagationParams {
        k: 1,
        ..PropagationParams::default()
    };
    for index in 0..3 {
        let ep = Episode::generate(&scene, 5, index).unwrap();
        let res = run_propagation(m.encoder(), &store, &ep, &nearest).unwrap();
        assert_eq!(res.frame_miou.len(), scene.frames - 1);
        assert!(res.miou > 0.95, "episode {index}: {}", res.miou);
        let first_only = PropagationParams { m: 0, ..nearest };
        assert!(run_propagation(m.encoder(), &store, &ep, &first_only).unwrap().miou > 0.95);
    }
}

#[test]
fn sweep_is_deterministic_and_shaped() {
    let (m, store) = encoder(EncoderConfig::tiny(), 6);
    let scene = tiny_scene();
    let eps: Vec<Episode> = (0..2).map(|i| Episode::generate(&scene, 6, i).unwrap()).collect();
    let grid = PropagationGrid {
        taus: vec![0.07, 0.2],
        ks: vec![1, 3],
        ms: vec![0],
        radii: vec![Some(1), None],
    };
    let a = sweep(m.encoder(), &store, &eps, &grid).unwrap();
    assert_eq!(a.len(), 2 * 8);
    let b = sweep(m.encoder(), &store, &eps, &grid).unwrap();
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    write_sweep_csv(&a, &mut ca).unwrap();
    write_sweep_csv(&b, &mut cb).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(String::from_utf8(ca).unwrap().lines().count(), 17);
    assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.miou)));
}

#[test]
fn probe_dataset_splits_by_episode() {
    let cfg = EncoderConfig::tiny();
    let (m, store) = encoder(cfg.clone(), 7);
    let scene = tiny_scene();
    let eps: Vec<Episode> = (0..6).map(|i| Episode::generate(&scene, 7, i).unwrap()).collect();
    let before = store.clone();
    let ds = build_probe_dataset(m.encoder(), &store, &eps, 4, 11, 0.34).unwrap();
    for (_, name, t) in store.iter() {
        let id = before.id(name).unwrap();
        assert_eq!(t.data(), before.get(id).data());
    }
    assert_eq!(ds, build_probe_dataset(m.encoder(), &store, &eps, 4, 11, 0.34).unwrap());
    assert_eq!(ds.train.len() + ds.test.len(), 6 * 20);
    let train_eps: BTreeSet<u64> = ds.train.iter().map(|s| s.episode).collect();
    let test_eps: BTreeSet<u64> = ds.test.iter().map(|s| s.episode).collect();
    assert!(train_eps.is_disjoint(&test_eps));
    assert_eq!(test_eps.len(), 3);

    for s in ds.train.iter().chain(&ds.test) {
        assert_eq!(s.input.len(), 2 * cfg.embed_dim);
        let ep = &eps[s.episode as usize];
        let now = ep.state(s.t).unwrap();
        let past = ep.state(s.t - 4).unwrap();
        let (half, vmax) = (8.0, scene.speed[1]);
        let expected = [
            (now[0] - half) / half,
            (now[1] - half) / half,
            now[2] / vmax,
            now[3] / vmax,
            (now[0] - past[0]) / (4.0 * vmax),
            (now[1] - past[1]) / (4.0 * vmax),
        ];
        assert_eq!(s.target, expected);
        assert!(s.target.iter().all(|v| (-1.0..=1.0).contains(v)));
        let cls_now = squeeze(m.encoder(), &store, &ep.render(s.t).unwrap().image)
            .unwrap()
            .cls
            .unwrap();
        for (a, b) in s.input[cfg.embed_dim..].iter().zip(&cls_now) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    assert!(build_probe_dataset(m.encoder(), &store, &eps, 24, 11, 0.34).is_err());
}

fn synthetic(n: usize, seed: u64, target: impl Fn(&[f64]) -> [f64; 6]) -> Vec<ProbeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let input: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            ProbeSample {
                target: target(&input),
                input,
                episode: i as u64,
                t: 0,
            }
        })
        .collect()
}

#[test]
fn constant_targets_give_the_constant() {
    let c = [0.25, -0.5, 0.0, 0.75, 0.1, -0.1];
    let train = synthetic(256, 1, |_| c);
    let test = synthetic(64, 2, |_| c);
    let model = train_probe(
        &train,
        &ProbeConfig {
            epochs: 60,
            ..ProbeConfig::default()
        },
    )
    .unwrap();
    let m = eval_probe(&model, &test).unwrap();
    assert!(m.mse < 1e-4, "{}", m.mse);
    assert!(m.r2.iter().all(Option::is_none));
    assert!(m.mean_r2.is_none());
}

#[test]
fn cheat_features_are_fit_almost_exactly() {
    let cfg = EncoderConfig::tiny();
    let (m, store) = encoder(cfg, 8);
    let scene = tiny_scene();
    let eps: Vec<Episode> = (0..80).map(|i| Episode::generate(&scene, 8, i).unwrap()).collect();
    let ds = build_probe_dataset(m.encoder(), &store, &eps, 4, 0, 0.25)
        .unwrap()
        .with_cheat_features();
    let probe = ProbeConfig::default();
    let model = train_probe(&ds.train, &probe).unwrap();
    let metrics = eval_probe(&model, &ds.test).unwrap();
    assert!(metrics.mean_r2.unwrap() > 0.99, "{metrics:?}");

    let again = train_probe(&ds.train, &probe).unwrap();
    for ((_, _, a), (_, _, b)) in model.store.iter().zip(again.store.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn r_squared_matches_direct_formula() {
    let y = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(r_squared(&y, &y), Some(1.0));
    assert_eq!(r_squared(&[2.5; 4], &y), Some(0.0));
    assert_eq!(r_squared(&[1.0; 4], &[3.0; 4]), None);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.random_range(3..200);
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let p: Vec<f64> = y.iter().map(|v| v + rng.random::<f64>() - 0.5).collect();
        // Population form: 1 - mean squared residual / variance.
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let mse = p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
        assert!((r_squared(&p, &y).unwrap() - (1.0 - mse / var)).abs() < 1e-12);
    }
}
