use std::io::Write;

use serde::Serialize;

use super::{bottleneck_reliance, build_model, held_out_episode, pretrain, PretrainOptions, RunConfig, Seeds};
use crate::eval::{build_probe_dataset, eval_probe, train_probe, ProbeConfig, ProbeDataset, ProbeMetrics};
use crate::objective::{FramePair, Objective, PathControl};
use crate::rng::{substream, Stream};
use crate::scene::{sample_pair, Episode};
use crate::tensor::{grad_check, GradCheckConfig, GradCheckReport, ParamStore, Scalar, TensorError};
use crate::vit::Encoder;
use crate::{Error, Result};

/// Finite-difference check of one objective at the tiny scale, in `f64`.
/// `corrupt` perturbs one analytic gradient entry (negative control).
pub fn grad_check_objective(objective: Objective, corrupt: Option<(String, f64)>) -> Result<GradCheckReport> {
    let cfg = RunConfig::tiny(objective);
    let (model, mut store) = build_model::<f64>(&cfg)?;
    let mut rng = substream(cfg.seeds.data, Stream::Eval, 0);
    let mut pairs = Vec::with_capacity(cfg.batch_size);
    for i in 0..cfg.batch_size as u64 {
        let ep = Episode::generate(&cfg.scene, cfg.seeds.data, i)?;
        pairs.push(sample_pair(&ep, cfg.scene.gap, false, &mut rng)?);
    }
    let masks = model.sample_masks(pairs.len(), cfg.mask_ratio, &mut rng)?;
    let frames: Vec<FramePair<'_>> = pairs
        .iter()
        .map(|p| FramePair {
            reference: &p.reference,
            target: &p.target,
        })
        .collect();
    let check = GradCheckConfig {
        corrupt,
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        &mut store,
        |g, s| {
            model
                .loss(g, s, &frames, &masks, PathControl::default())
                .map(|o| o.loss)
                .map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => TensorError::Shape {
                        op: "objective",
                        detail: other.to_string(),
                    },
                })
        },
        &check,
    )?;
    Ok(report)
}

/// Ratios swept by `ablate-mask-ratio` unless given.
pub const DEFAULT_RATIOS: [f64; 4] = [0.5, 0.75, 0.9, 0.95];

pub const ABLATION_HEADER: &str = "ratio,seed,final_loss,bottleneck_delta,probe_r2";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub ratio: f64,
    pub seed: u64,
    /// Mean training loss over the last 100 steps.
    pub final_loss: f64,
    /// Relative eval-loss increase with the bottleneck zeroed.
    pub bottleneck_delta: f64,
    pub probe_r2: Option<f64>,
}

/// Held-out episodes and split shared by probe evaluations.
#[derive(Debug, Clone)]
pub struct ProbeSettings {
    pub episodes: u64,
    pub delta: usize,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub probe: ProbeConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            episodes: 200,
            delta: 4,
            test_fraction: 0.25,
            split_seed: 0,
            // Samples within an episode are strongly correlated; many short
            // fits over many episodes generalize better than long ones.
            probe: ProbeConfig {
                epochs: 30,
                ..ProbeConfig::default()
            },
        }
    }
}

/// Probe samples from the held-out episodes of `cfg`.
pub fn probe_dataset<T: Scalar>(
    cfg: &RunConfig,
    encoder: &Encoder,
    store: &ParamStore<T>,
    settings: &ProbeSettings,
) -> Result<ProbeDataset> {
    let episodes = (0..settings.episodes)
        .map(|i| held_out_episode(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    build_probe_dataset(
        encoder,
        store,
        &episodes,
        settings.delta,
        settings.split_seed,
        settings.test_fraction,
    )
}

/// Trains and scores a probe on the held-out episodes of `cfg`.
pub fn probe_encoder<T: Scalar>(
    cfg: &RunConfig,
    encoder: &Encoder,
    store: &ParamStore<T>,
    settings: &ProbeSettings,
) -> Result<ProbeMetrics> {
    let ds = probe_dataset(cfg, encoder, store, settings)?;
    let model = train_probe(&ds.train, &settings.probe)?;
    eval_probe(&model, &ds.test)
}

/// Mean of the last (up to) 100 entries.
pub fn tail_mean(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len().saturating_sub(100)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Trains one model per (ratio, seed) under `base` and reports final loss,
/// bottleneck reliance on held-out pairs and probe R². Runs land in
/// `base.output_dir/r<ratio>_s<seed>`; rows stream to `csv` as they finish.
pub fn ablate_mask_ratio<T: Scalar, W: Write>(
    base: &RunConfig,
    ratios: &[f64],
    seeds: &[u64],
    probe: &ProbeSettings,
    csv: W,
) -> Result<Vec<AblationRow>> {
    if ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
        return Err(Error::Config("mask ratios must lie in (0, 1)".into()));
    }
    let mut w = csv::Writer::from_writer(csv);
    w.write_record(ABLATION_HEADER.split(','))?;
    w.flush()?;
    let mut rows = Vec::new();
    for &ratio in ratios {
        for &seed in seeds {
            let cfg = RunConfig {
                mask_ratio: ratio,
                seeds: Seeds {
                    weights: seed,
                    data: seed,
                    masks: seed,
                },
                output_dir: base.output_dir.join(format!("r{ratio}_s{seed}")),
                ..base.clone()
            };
            cfg.validate()?;
            let summary = pretrain::<T>(&cfg, &PretrainOptions::default())?;
            let (model, mut store) = build_model::<T>(&cfg)?;
            crate::harness::Checkpoint::load(&summary.final_checkpoint)?.load_params(&mut store)?;
            let reliance = bottleneck_reliance(&cfg, &model, &store, 64, seed)?;
            let metrics = probe_encoder(&cfg, model.encoder(), &store, probe)?;
            let row = AblationRow {
                ratio,
                seed,
                final_loss: tail_mean(&summary.losses),
                bottleneck_delta: reliance.delta(),
                probe_r2: metrics.mean_r2,
            };
            w.write_record([
                row.ratio.to_string(),
                row.seed.to_string(),
                row.final_loss.to_string(),
                row.bottleneck_delta.to_string(),
                row.probe_r2.map_or(String::new(), |v| v.to_string()),
            ])?;
            w.flush()?;
            rows.push(row);
        }
    }
    Ok(rows)
}
