use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tobo_core::scene::{
    augment_pair, batch_with_repeat, dump_episode, load_frame, load_labels, sample_frames, sample_pair, Episode,
    SceneConfig,
};

fn unfolded(p0: f64, v0: f64, t: usize, lo: f64, hi: f64) -> (f64, f64) {
    let len = hi - lo;
    let u = (p0 - lo + v0 * t as f64).rem_euclid(2.0 * len);
    if u <= len {
        (lo + u, v0)
    } else {
        (lo + 2.0 * len - u, -v0)
    }
}

#[test]
fn same_seed_gives_identical_episode() {
    let cfg = SceneConfig::default();
    let a = Episode::generate(&cfg, 7, 3).unwrap();
    let b = Episode::generate(&cfg, 7, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.render(10).unwrap(), b.render(10).unwrap());
    assert_ne!(a, Episode::generate(&cfg, 7, 4).unwrap());
}

#[test]
fn trajectories_match_folded_reflection_and_stay_inside() {
    let cfg = SceneConfig {
        frames: 400,
        speed: [1.0, 3.0],
        ..SceneConfig::default()
    };
    for index in 0..20 {
        let ep = Episode::generate(&cfg, 1, index).unwrap();
        for s in &ep.sprites {
            let (lo, hi) = (s.radius, cfg.size as f64 - s.radius);
            let speed = s.velocities[0][0].hypot(s.velocities[0][1]);
            for t in 0..cfg.frames {
                for a in 0..2 {
                    let p = s.centers[t][a];
                    assert!(p >= lo && p <= hi);
                    let (q, v) = unfolded(s.centers[0][a], s.velocities[0][a], t, lo, hi);
                    assert!((p - q).abs() < 1e-9, "frame {t}: {p} vs {q}");
                    assert!((s.velocities[t][a] - v).abs() < 1e-12);
                }
                let sp = s.velocities[t][0].hypot(s.velocities[t][1]);
                assert!((sp - speed).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rendering_is_consistent_with_geometry() {
    let cfg = SceneConfig::default();
    for index in 0..10 {
        let ep = Episode::generate(&cfg, 2, index).unwrap();
        for t in [0, 17, 63] {
            let r = ep.render(t).unwrap();
            assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(r.state, ep.state(t).unwrap());
            let covering = |y: usize, x: usize| {
                ep.sprites
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| {
                        let [cx, cy] = s.centers[t];
                        s.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, s.radius)
                    })
                    .map(|(k, _)| k as u16 + 1)
                    .max()
                    .unwrap_or(0)
            };
            for (k, s) in ep.sprites.iter().enumerate() {
                let [cx, cy] = s.centers[t];
                let (x, y) = (cx as usize, cy as usize);
                let label = r.labels.get(y, x);
                assert_eq!(label, covering(y, x));
                assert!(label > k as u16);
            }
            for y in 0..cfg.size {
                for x in 0..cfg.size {
                    let l = r.labels.get(y, x);
                    if l > 0 {
                        let s = &ep.sprites[l as usize - 1];
                        let [cx, cy] = s.centers[t];
                        assert!(s.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, s.radius));
                        let c = s.color.map(|v| v as f32 / 255.0);
                        assert_eq!(r.image.pixel(y, x), c);
                    }
                }
            }
        }
    }
}

#[test]
fn no_sprites_renders_background_only() {
    let cfg = SceneConfig {
        sprites: 0,
        ..SceneConfig::default()
    };
    let ep = Episode::generate(&cfg, 0, 0).unwrap();
    let r = ep.render(5).unwrap();
    assert!(r.labels.data.iter().all(|&l| l == 0));
    assert!(r.state.is_empty());
    assert!(ep.render(64).is_err());
}

#[test]
fn sampled_gaps_respect_the_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let (t, k) = sample_frames(64, [2, 24], &mut rng).unwrap();
        assert!((2..=24).contains(&k) && t + k < 64);
    }
    for _ in 0..100 {
        assert_eq!(sample_frames(3, [2, 24], &mut rng).unwrap(), (0, 2));
    }
    assert!(sample_frames(2, [2, 24], &mut rng).is_err());
}

#[test]
fn gap_histogram_matches_exact_law() {
    let (frames, gap, draws) = (64usize, [2usize, 24usize], 100_000usize);
    // P(k) = sum over admissible t of P(t) / |admissible k given t|.
    let ts = frames - gap[0];
    let mut expected = vec![0.0; gap[1] + 1];
    for t in 0..ts {
        let hi = gap[1].min(frames - 1 - t);
        for p in expected.iter_mut().take(hi + 1).skip(gap[0]) {
            *p += 1.0 / ts as f64 / (hi - gap[0] + 1) as f64;
        }
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..draws {
        *counts
            .entry(sample_frames(frames, gap, &mut rng).unwrap().1)
            .or_default() += 1;
    }
    for (k, &p) in expected.iter().enumerate().skip(gap[0]) {
        let f = *counts.get(&k).unwrap_or(&0) as f64 / draws as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((f - p).abs() <= 3.0 * sigma, "k={k}: {f} vs {p}");
    }
}

#[test]
fn augmentation_is_shared_and_replayable() {
    let cfg = SceneConfig::default();
    let ep = Episode::generate(&cfg, 3, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let raw = sample_pair(&ep, cfg.gap, true, &mut rng).unwrap();
        let aug = augment_pair(&raw, &cfg, &mut rng).unwrap();
        assert_eq!(aug.augmentation.apply(&raw.reference, cfg.size), aug.reference);
        assert_eq!(aug.augmentation.apply(&raw.target, cfg.size), aug.target);
        assert_eq!(
            aug.augmentation
                .apply_labels(raw.target_labels.as_ref().unwrap(), cfg.size),
            *aug.target_labels.as_ref().unwrap()
        );
        assert!(aug.target_labels.as_ref().unwrap().max_label() <= 3);

        let mut same = raw.clone();
        same.target = same.reference.clone();
        let out = augment_pair(&same, &cfg, &mut rng).unwrap();
        assert_eq!(out.reference, out.target);
    }
}

#[test]
fn repeated_sampling_groups_pairs_by_clip() {
    let cfg = SceneConfig::default();
    let episodes: Vec<Episode> = (0..40).map(|i| Episode::generate(&cfg, 4, i).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let plain = batch_with_repeat(&episodes, 8, 1, &cfg, &mut rng).unwrap();
    let mut ids: Vec<u64> = plain.iter().map(|p| p.episode).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 8);

    let mut differing = 0;
    let trials = 20;
    for _ in 0..trials {
        let batch = batch_with_repeat(&episodes, 32, 2, &cfg, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        let mut per_clip: HashMap<u64, usize> = HashMap::new();
        for p in &batch {
            *per_clip.entry(p.episode).or_default() += 1;
        }
        assert_eq!(per_clip.len(), 16);
        assert!(per_clip.values().all(|&c| c == 2));
        for chunk in batch.chunks(2) {
            assert_eq!(chunk[0].episode, chunk[1].episode);
            if chunk[0].augmentation != chunk[1].augmentation {
                differing += 1;
            }
        }
    }
    assert_eq!(differing, trials * 16);
    assert!(batch_with_repeat(&episodes, 31, 2, &cfg, &mut rng).is_err());
    assert!(batch_with_repeat(&episodes, 32, 0, &cfg, &mut rng).is_err());
}

#[test]
fn dump_round_trips_frames_and_labels() {
    let cfg = SceneConfig {
        frames: 4,
        ..SceneConfig::default()
    };
    let ep = Episode::generate(&cfg, 5, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = dump_episode(&ep, dir.path()).unwrap();
    assert_eq!(manifest.frames, 4);
    assert_eq!(manifest.sprites, 3);
    assert_eq!(manifest.config_hash, cfg.hash().unwrap());
    let on_disk: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk["seed"], 5);
    for t in 0..4 {
        let r = ep.render(t).unwrap();
        assert_eq!(load_frame(&dir.path().join(&manifest.frame_files[t])).unwrap(), r.image);
        let labels = load_labels(&dir.path().join(&manifest.label_files[t]), 32, 32).unwrap();
        assert_eq!(labels, r.labels);
    }
}
