//! Acceptance report. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a correctness criterion fails. The empirical gain checks
//! (bottleneck reliance, propagation and probe gains) are reported without
//! failing the run unless `TOBO_ACCEPTANCE_STRICT=1`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tobo_core::eval::{
    best_point, eval_probe, run_propagation, sweep, train_probe, PropagationGrid, PropagationParams,
};
use tobo_core::harness::{
    bottleneck_reliance, build_model, grad_check_objective, held_out_episode, pretrain, probe_dataset, probe_encoder,
    tail_mean, Checkpoint, PretrainOptions, ProbeSettings, RunConfig, Seeds, Trainer,
};
use tobo_core::objective::{mask_count, sample_mask, tobo_loss, Model, Objective};
use tobo_core::rng::{substream, Stream};
use tobo_core::scene::Episode;
use tobo_core::tensor::{ParamStore, Precision};

/// Steps of the shorter runs behind the three-seed trends.
const TREND_STEPS: u64 = 1000;
const TREND_SEEDS: [u64; 3] = [0, 1, 2];

struct Report {
    strict: bool,
    hard_failures: Vec<u8>,
    soft_failures: Vec<u8>,
}

impl Report {
    fn line(&mut self, id: u8, hard: bool, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id}: {verdict} {detail}");
        if !pass {
            if hard || self.strict {
                self.hard_failures.push(id);
            } else {
                self.soft_failures.push(id);
            }
        }
    }
}

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn seeded(base: &RunConfig, seed: u64) -> RunConfig {
    RunConfig {
        seeds: Seeds {
            weights: seed,
            data: seed,
            masks: seed,
        },
        ..base.clone()
    }
}

fn load(path: &Path) -> (RunConfig, Model, ParamStore<f32>) {
    let ck = Checkpoint::load(path).unwrap();
    let cfg = ck.manifest.config.clone();
    let (model, mut store) = build_model::<f32>(&cfg).unwrap();
    ck.load_params(&mut store).unwrap();
    (cfg, model, store)
}

fn criterion_1(report: &mut Report) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut all = true;
    for objective in Objective::ALL {
        let r = grad_check_objective(objective, None).unwrap();
        worst = worst.max(r.max_rel_error());
        all &= r.passed() && r.max_rel_error() < 1e-4;
    }
    let took = start.elapsed();
    report.line(
        1,
        true,
        all && took < Duration::from_secs(120),
        format!(
            "max relative error {worst:.2e} < 1e-4 over tobo/mae/xattn, {:.1}s < 120s",
            took.as_secs_f64()
        ),
    );
}

fn criterion_2(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut zero, mut anti, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let dim = rng.random_range(1..=48);
        let rows = rng.random_range(1..=16);
        let x: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pred: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let alpha = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = pred.iter().map(|v| alpha * v).collect();
        zero = zero.max(tobo_loss(&x, &x, dim).unwrap().loss.abs());
        anti = anti.max((tobo_loss(&neg, &x, dim).unwrap().loss - 2.0).abs());
        let base = tobo_loss(&pred, &x, dim).unwrap().loss;
        scale = scale.max((tobo_loss(&scaled, &x, dim).unwrap().loss - base).abs());
    }
    report.line(
        2,
        true,
        zero < 1e-12 && anti < 1e-12 && scale < 1e-6,
        format!("1000 instances: |L(x,x)| {zero:.1e}, |L(-x,x)-2| {anti:.1e}, scale drift {scale:.1e} < 1e-6"),
    );
}

fn criterion_3(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut exact = 0;
    for _ in 0..1000 {
        let n = rng.random_range(4..=512);
        let r: f64 = loop {
            let r = rng.random::<f64>();
            if r > 0.0 {
                break r;
            }
        };
        let floor = BigRational::from_float(r).unwrap() * BigRational::from_integer(BigInt::from(n));
        let expected: usize = floor.floor().to_integer().try_into().unwrap();
        let m = sample_mask(n, r, &mut rng).unwrap();
        if mask_count(n, r).unwrap() == expected && m.masked.len() == expected {
            exact += 1;
        }
    }
    // rN is integral here, so the per-index masking frequency is exactly r.
    let (n, r, draws) = (64, 0.75, 100_000);
    let mut counts = vec![0usize; n];
    let mut mrng = substream(3, Stream::Masks, 0);
    for _ in 0..draws {
        for i in sample_mask(n, r, &mut mrng).unwrap().masked {
            counts[i] += 1;
        }
    }
    let sigma = (r * (1.0 - r) / draws as f64).sqrt();
    let worst = counts
        .iter()
        .map(|&c| (c as f64 / draws as f64 - r).abs() / sigma)
        .fold(0.0, f64::max);
    report.line(
        3,
        true,
        exact == 1000 && worst <= 3.0,
        format!("|M| exact in {exact}/1000 draws; worst per-index frequency {worst:.2} sigma <= 3 at 1e5 draws"),
    );
}

fn criterion_4(report: &mut Report, desk: &DeskRun) {
    let first = desk.losses[..100].iter().sum::<f64>() / 100.0;
    let last = tail_mean(&desk.losses);
    let ratio = last / first;
    report.line(
        4,
        true,
        ratio <= 0.6 && desk.seconds < 1800.0,
        format!(
            "final/initial 100-step mean loss {last:.4}/{first:.4} = {ratio:.3} <= 0.6, {:.0}s < 1800s",
            desk.seconds
        ),
    );
}

struct DeskRun {
    checkpoint: PathBuf,
    losses: Vec<f64>,
    seconds: f64,
}

struct TrendRun {
    seed: u64,
    tobo_09: PathBuf,
    tobo_05: PathBuf,
    mae: PathBuf,
}

fn criterion_5(report: &mut Report, desk: &DeskRun, trends: &[TrendRun]) {
    let (cfg, model, store) = load(&desk.checkpoint);
    let rel = bottleneck_reliance(&cfg, &model, &store, 256, 0).unwrap();
    let mut wins = 0;
    let mut detail = Vec::new();
    for t in trends {
        let delta = |p: &Path| {
            let (cfg, model, store) = load(p);
            bottleneck_reliance(&cfg, &model, &store, 256, 0).unwrap().delta()
        };
        let (a, b) = (delta(&t.tobo_09), delta(&t.tobo_05));
        wins += usize::from(a > b);
        detail.push(format!("seed {}: {:+.2}% vs {:+.2}%", t.seed, 100.0 * a, 100.0 * b));
    }
    report.line(
        5,
        false,
        rel.delta() >= 0.2 && 2 * wins > trends.len(),
        format!(
            "zeroing the bottleneck raises loss {:.4} -> {:.4} ({:+.1}%, need >= +20%); r=0.9 above r=0.5 in {wins}/{} seeds [{}]",
            rel.loss,
            rel.zeroed_loss,
            100.0 * rel.delta(),
            trends.len(),
            detail.join("; ")
        ),
    );
}

fn criterion_6(report: &mut Report, desk: &DeskRun) {
    let (cfg, model, store) = load(&desk.checkpoint);
    let (random, random_store) = build_model::<f32>(&cfg).unwrap();
    let episodes: Vec<Episode> = (0..20).map(|i| held_out_episode(&cfg, i).unwrap()).collect();
    let grid = PropagationGrid::default();
    let (tp, tm) = best_point(&sweep(model.encoder(), &store, &episodes, &grid).unwrap()).unwrap();
    let (rp, rm) = best_point(&sweep(random.encoder(), &random_store, &episodes, &grid).unwrap()).unwrap();

    let nearest = PropagationParams {
        k: 1,
        ..PropagationParams::default()
    };
    let still = cfg.scene.static_scene();
    let mut worst_static = f64::INFINITY;
    for (enc, st) in [(model.encoder(), &store), (random.encoder(), &random_store)] {
        for i in 0..3 {
            let ep = Episode::generate(&still, cfg.seeds.data, 1_000_000 + i).unwrap();
            worst_static = worst_static.min(run_propagation(enc, st, &ep, &nearest).unwrap().miou);
        }
    }
    let gain = tm - rm;
    report.line(
        6,
        false,
        gain >= 0.10 && worst_static > 0.95,
        format!(
            "best-point mIoU trained {tm:.3} (k={} m={} radius={:?}) vs random {rm:.3} (k={} m={} radius={:?}): {gain:+.3}, need >= +0.10; static scenes min {worst_static:.3} > 0.95",
            tp.k, tp.m, tp.radius, rp.k, rp.m, rp.radius
        ),
    );
}

fn criterion_7(report: &mut Report, desk: &DeskRun, trends: &[TrendRun]) {
    let settings = ProbeSettings::default();
    let (cfg, model, store) = load(&desk.checkpoint);
    let (random, random_store) = build_model::<f32>(&cfg).unwrap();
    let trained = probe_encoder(&cfg, model.encoder(), &store, &settings).unwrap();
    let control = probe_encoder(&cfg, random.encoder(), &random_store, &settings).unwrap();
    let cheat_ds = probe_dataset(&cfg, random.encoder(), &random_store, &settings)
        .unwrap()
        .with_cheat_features();
    let cheat = eval_probe(&train_probe(&cheat_ds.train, &settings.probe).unwrap(), &cheat_ds.test).unwrap();
    let (t, c) = (trained.mean_r2.unwrap(), control.mean_r2.unwrap());
    let cheat_r2 = cheat.mean_r2.unwrap();

    let mut tobo_ahead = 0;
    let mut detail = Vec::new();
    for run in trends {
        let r2 = |p: &Path| {
            let (cfg, model, store) = load(p);
            probe_encoder(&cfg, model.encoder(), &store, &settings)
                .unwrap()
                .mean_r2
                .unwrap()
        };
        let (a, b) = (r2(&run.tobo_09), r2(&run.mae));
        tobo_ahead += usize::from(a > b);
        detail.push(format!("seed {}: tobo {a:.3} vs mae {b:.3}", run.seed));
    }
    // The gain is measured as specified; a negative R2 means the probe does
    // worse than predicting the test mean, which the line spells out.
    let caveat = if t < 0.0 || c < 0.0 {
        " (R2 below zero: worse than the test mean)"
    } else {
        ""
    };
    report.line(
        7,
        false,
        t - c >= 0.2 && cheat_r2 > 0.99,
        format!(
            "mean test R2 trained {t:.3} vs random {c:.3}: {:+.3}, need >= +0.2{caveat}; cheat features {cheat_r2:.4} > 0.99; tobo above mae in {tobo_ahead}/{} seeds (reported) [{}]",
            t - c,
            trends.len(),
            detail.join("; ")
        ),
    );
}

fn criterion_8(report: &mut Report, dir: &Path) {
    let base = RunConfig {
        steps: 30,
        checkpoint_interval: 10,
        precision: Precision::F32,
        ..RunConfig::default()
    };
    let run = |name: &str, opts: &PretrainOptions| {
        let cfg = RunConfig {
            output_dir: dir.join(name),
            ..base.clone()
        };
        pretrain::<f32>(&cfg, opts).unwrap()
    };
    let a = run("det_a", &PretrainOptions::default());
    let b = run("det_b", &PretrainOptions::default());
    let same_metrics = fs::read(&a.metrics).unwrap() == fs::read(&b.metrics).unwrap();

    let ck = Checkpoint::load(&a.final_checkpoint).unwrap();
    let mut t = Trainer::<f32>::new(ck.manifest.config.clone()).unwrap();
    ck.load_params(&mut t.store).unwrap();
    ck.load_optimizer(&t.store, &mut t.optim).unwrap();
    let again = dir.join("det_a/again.json");
    Checkpoint::capture(&ck.manifest.config, ck.manifest.step, &t.store, &t.optim)
        .unwrap()
        .save(&again)
        .unwrap();
    let same_blob =
        fs::read(a.final_checkpoint.with_extension("bin")).unwrap() == fs::read(again.with_extension("bin")).unwrap();

    run(
        "det_c",
        &PretrainOptions {
            stop_after: Some(17),
            ..PretrainOptions::default()
        },
    );
    let resumed = run(
        "det_c",
        &PretrainOptions {
            resume: Some(dir.join("det_c/checkpoint_000010.json")),
            ..PretrainOptions::default()
        },
    );
    let same_trace =
        resumed.losses == a.losses[10..] && fs::read(&resumed.metrics).unwrap() == fs::read(&a.metrics).unwrap();
    report.line(
        8,
        true,
        same_metrics && same_blob && same_trace,
        format!("identical metrics CSVs {same_metrics}; checkpoint save-load-save byte-identical {same_blob}; resumed trace identical {same_trace}"),
    );
}

fn train(cfg: &RunConfig) -> (PathBuf, Vec<f64>, f64) {
    let start = Instant::now();
    let run = pretrain::<f32>(cfg, &PretrainOptions::default()).unwrap();
    (run.final_checkpoint, run.losses, start.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    // Test filters and libtest flags are accepted and ignored.
    let mut report = Report {
        strict: std::env::var("TOBO_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1"),
        hard_failures: Vec::new(),
        soft_failures: Vec::new(),
    };
    let dir = work_dir();
    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_3(&mut report);

    let desk_cfg = RunConfig {
        output_dir: dir.join("desk"),
        ..RunConfig::default()
    };
    let (checkpoint, losses, seconds) = train(&desk_cfg);
    let desk = DeskRun {
        checkpoint,
        losses,
        seconds,
    };
    criterion_4(&mut report, &desk);

    let trends: Vec<TrendRun> = TREND_SEEDS
        .iter()
        .map(|&seed| {
            let short = RunConfig {
                steps: TREND_STEPS,
                ..seeded(&RunConfig::default(), seed)
            };
            let at = |name: &str, cfg: RunConfig| {
                train(&RunConfig {
                    output_dir: dir.join(format!("{name}_s{seed}")),
                    ..cfg
                })
                .0
            };
            TrendRun {
                seed,
                tobo_09: at("tobo_r0.9", short.clone()),
                tobo_05: at(
                    "tobo_r0.5",
                    RunConfig {
                        mask_ratio: 0.5,
                        ..short.clone()
                    },
                ),
                mae: at(
                    "mae_r0.9",
                    RunConfig {
                        objective: Objective::Mae,
                        ..short.clone()
                    },
                ),
            }
        })
        .collect();
    criterion_5(&mut report, &desk, &trends);
    criterion_6(&mut report, &desk);
    criterion_7(&mut report, &desk, &trends);
    criterion_8(&mut report, &dir);

    if !report.soft_failures.is_empty() {
        println!(
            "not met (reported only; TOBO_ACCEPTANCE_STRICT=1 makes them fatal): {:?}",
            report.soft_failures
        );
    }
    if report.hard_failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {:?}", report.hard_failures);
        ExitCode::FAILURE
    }
}
