use std::fs;
use std::path::Path;

use tobo_core::harness::{
    grad_check_objective, pretrain, training_batch, Checkpoint, PretrainOptions, RunConfig, Trainer, METRICS_HEADER,
};
use tobo_core::objective::Objective;
use tobo_core::tensor::Precision;

fn tiny_run(dir: &Path, steps: u64) -> RunConfig {
    RunConfig {
        steps,
        checkpoint_interval: 3,
        output_dir: dir.to_path_buf(),
        ..RunConfig::tiny(Objective::Tobo)
    }
}

#[test]
fn config_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let mut cfg = RunConfig::default();
    cfg.mask_ratio = 0.75;
    cfg.seeds.masks = 9;
    cfg.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);

    fs::write(&path, r#"{"objective": "mae", "steps": 10}"#).unwrap();
    let partial = RunConfig::load(&path).unwrap();
    assert_eq!(partial.objective, Objective::Mae);
    assert_eq!(partial.batch_size, 32);

    fs::write(&path, r#"{"stpes": 10}"#).unwrap();
    assert!(RunConfig::load(&path).is_err());
}

#[test]
fn hash_tracks_numeric_fields_only() {
    let base = RunConfig::default();
    let h = base.hash().unwrap();
    let changed: Vec<RunConfig> = vec![
        RunConfig {
            mask_ratio: 0.75,
            ..base.clone()
        },
        RunConfig {
            repeat_factor: 4,
            ..base.clone()
        },
        RunConfig {
            batch_size: 16,
            ..base.clone()
        },
        RunConfig {
            steps: 10,
            ..base.clone()
        },
        RunConfig {
            episode_pool: 7,
            ..base.clone()
        },
        RunConfig {
            precision: Precision::F64,
            ..base.clone()
        },
        RunConfig {
            objective: Objective::Mae,
            ..base.clone()
        },
    ];
    for c in &changed {
        assert_ne!(c.hash().unwrap(), h);
    }
    let mut c = base.clone();
    c.seeds.data = 1;
    assert_ne!(c.hash().unwrap(), h);
    c = base.clone();
    c.optim.lr *= 2.0;
    assert_ne!(c.hash().unwrap(), h);
    c = base.clone();
    c.scene.gap = [3, 24];
    assert_ne!(c.hash().unwrap(), h);
    c = base.clone();
    c.encoder.depth = 3;
    assert_ne!(c.hash().unwrap(), h);
    c = base.clone();
    c.decoder.pos_embed = false;
    assert_ne!(c.hash().unwrap(), h);

    c = base.clone();
    c.output_dir = "elsewhere".into();
    c.log_interval = 5;
    c.checkpoint_interval = 0;
    assert_eq!(c.hash().unwrap(), h);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = RunConfig::default();
    assert!(base.validate().is_ok());
    for bad in [
        RunConfig {
            batch_size: 31,
            ..base.clone()
        },
        RunConfig {
            mask_ratio: 1.0,
            ..base.clone()
        },
        RunConfig {
            steps: 0,
            ..base.clone()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    let mut c = base.clone();
    c.scene.size = 64;
    assert!(c.validate().is_err());
}

#[test]
fn batches_depend_only_on_seed_and_step() {
    let cfg = RunConfig::tiny(Objective::Tobo);
    let a = training_batch(&cfg, 5).unwrap();
    assert_eq!(a, training_batch(&cfg, 5).unwrap());
    assert_ne!(a, training_batch(&cfg, 6).unwrap());
    assert_eq!(a.len(), cfg.batch_size);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 2);
    let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
    t.train_step(None).unwrap();
    t.train_step(None).unwrap();
    let a = dir.path().join("a.json");
    t.checkpoint().unwrap().save(&a).unwrap();

    let loaded = Checkpoint::load(&a).unwrap();
    let mut u = Trainer::<f64>::new(cfg.clone()).unwrap();
    loaded.load_params(&mut u.store).unwrap();
    loaded.load_optimizer(&u.store, &mut u.optim).unwrap();
    let b = dir.path().join("b.json");
    Checkpoint::capture(&cfg, loaded.manifest.step, &u.store, &u.optim)
        .unwrap()
        .save(&b)
        .unwrap();
    assert_eq!(
        fs::read(dir.path().join("a.bin")).unwrap(),
        fs::read(dir.path().join("b.bin")).unwrap()
    );
    let strip = |p: &Path| fs::read_to_string(p).unwrap().replace("\"b.bin\"", "\"a.bin\"");
    assert_eq!(strip(&a), strip(&b));

    let f32_cfg = RunConfig {
        precision: Precision::F32,
        ..cfg.clone()
    };
    let t32 = Trainer::<f32>::new(f32_cfg.clone()).unwrap();
    let c = dir.path().join("c.json");
    t32.checkpoint().unwrap().save(&c).unwrap();
    let bytes = fs::read(dir.path().join("c.bin")).unwrap();
    assert_eq!(
        bytes.len(),
        4 * Checkpoint::load(&c).unwrap().values.iter().map(Vec::len).sum::<usize>()
    );
}

#[test]
fn mismatched_config_is_refused_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 2);
    let t = Trainer::<f64>::new(cfg.clone()).unwrap();
    let path = dir.path().join("ck.json");
    t.checkpoint().unwrap().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let other = RunConfig {
        mask_ratio: 0.5,
        ..cfg.clone()
    };
    assert!(Trainer::<f64>::resume(other.clone(), &ck, false).is_err());
    assert!(Trainer::<f64>::resume(other, &ck, true).is_ok());
    assert!(Trainer::<f64>::resume(cfg, &ck, false).is_ok());

    fs::write(dir.path().join("ck.bin"), [0u8; 12]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn identical_runs_write_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pretrain::<f64>(&tiny_run(a.path(), 5), &PretrainOptions::default()).unwrap();
    pretrain::<f64>(&tiny_run(b.path(), 5), &PretrainOptions::default()).unwrap();
    let ma = fs::read(a.path().join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.path().join("metrics.csv")).unwrap());
    let text = String::from_utf8(ma).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(text.lines().count(), 6);
    assert_eq!(
        fs::read(a.path().join("final.bin")).unwrap(),
        fs::read(b.path().join("final.bin")).unwrap()
    );
}

#[test]
fn resumed_run_reproduces_unbroken_trace() {
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let full = pretrain::<f64>(&tiny_run(whole.path(), 7), &PretrainOptions::default()).unwrap();

    let cfg = tiny_run(split.path(), 7);
    let first = pretrain::<f64>(
        &cfg,
        &PretrainOptions {
            stop_after: Some(4),
            ..PretrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(first.losses.len(), 4);
    // Steps 4.. of an interrupted run replayed from the periodic checkpoint
    // at step 3 must overwrite the rows logged after it.
    let rest = pretrain::<f64>(
        &cfg,
        &PretrainOptions {
            resume: Some(split.path().join("checkpoint_000003.json")),
            ..PretrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(rest.losses, full.losses[3..]);
    assert_eq!(
        fs::read(whole.path().join("metrics.csv")).unwrap(),
        fs::read(split.path().join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(whole.path().join("final.bin")).unwrap(),
        fs::read(split.path().join("final.bin")).unwrap()
    );
}

#[test]
fn grad_check_command_catches_a_corrupted_gradient() {
    let report = grad_check_objective(Objective::Tobo, Some(("decoder.head.bias".into(), 1.0))).unwrap();
    assert!(!report.passed());
    assert!(report.failures().any(|f| f.name == "decoder.head.bias"));
}
