use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::{Checkpoint, RunConfig};
use crate::objective::{FramePair, MaskSet, Model, PathControl};
use crate::rng::{substream, Stream};
use crate::scene::{batch_with_repeat, sample_pair, Episode, ScenePair};
use crate::tensor::{AdamW, Graph, LrSchedule, ParamStore, Scalar};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step,lr,loss,degenerate_patches";
pub const TIMING_HEADER: &str = "step,seconds";

/// Builds the model of `cfg` with weights drawn from the weight seed.
pub fn build_model<T: Scalar>(cfg: &RunConfig) -> Result<(Model, ParamStore<T>)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = substream(cfg.seeds.weights, Stream::Weights, 0);
    let model = Model::new(cfg.objective, cfg.encoder.clone(), &cfg.decoder, &mut store, &mut rng)?;
    Ok((model, store))
}

/// Training pairs of step `step`: a fixed function of the data seed and the
/// step index, independent of every earlier step.
pub fn training_batch(cfg: &RunConfig, step: u64) -> Result<Vec<ScenePair>> {
    let mut rng = substream(cfg.seeds.data, Stream::Data, step);
    let clips = cfg.batch_size / cfg.repeat_factor;
    let ids = rand::seq::index::sample(&mut rng, cfg.episode_pool as usize, clips);
    let episodes = ids
        .iter()
        .map(|i| Episode::generate(&cfg.scene, cfg.seeds.data, i as u64))
        .collect::<Result<Vec<_>>>()?;
    batch_with_repeat(&episodes, cfg.batch_size, cfg.repeat_factor, &cfg.scene, &mut rng)
}

/// Episode `i` of the held-out set: indices past the training pool.
pub fn held_out_episode(cfg: &RunConfig, i: u64) -> Result<Episode> {
    Episode::generate(&cfg.scene, cfg.seeds.data, cfg.episode_pool + i)
}

fn frame_pairs(pairs: &[ScenePair]) -> Vec<FramePair<'_>> {
    pairs
        .iter()
        .map(|p| FramePair {
            reference: &p.reference,
            target: &p.target,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub degenerate: usize,
    pub seconds: f64,
}

#[derive(Serialize)]
struct DivergenceDump {
    step: u64,
    data_seed: u64,
    mask_seed: u64,
    episodes: Vec<u64>,
    frames: Vec<[usize; 2]>,
    masks: Vec<MaskSet>,
}

/// Model, parameters and optimizer of one run, advanced a step at a time.
pub struct Trainer<T> {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub optim: AdamW<T>,
    schedule: LrSchedule,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        if T::PRECISION != cfg.precision {
            return Err(Error::Config(format!(
                "trainer instantiated at {:?} for a {:?} config",
                T::PRECISION,
                cfg.precision
            )));
        }
        let (model, store) = build_model(&cfg)?;
        let optim = AdamW::new(cfg.optim.adamw(), &store);
        let schedule = LrSchedule::new(cfg.optim.lr, cfg.steps, cfg.optim.warmup_fraction);
        Ok(Trainer {
            cfg,
            model,
            store,
            optim,
            schedule,
            step: 0,
        })
    }

    /// Continues from `ckpt`. A checkpoint of a different config is refused
    /// unless `force` is set.
    pub fn resume(cfg: RunConfig, ckpt: &Checkpoint, force: bool) -> Result<Self> {
        ckpt.check_config(&cfg, force)?;
        let mut t = Trainer::new(cfg)?;
        ckpt.load_params(&mut t.store)?;
        ckpt.load_optimizer(&t.store, &mut t.optim)?;
        t.step = ckpt.manifest.step;
        Ok(t)
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.cfg, self.step, &self.store, &self.optim)
    }

    /// Runs one optimizer step on the batch and masks of the current step
    /// index.
    pub fn train_step(&mut self, out_dir: Option<&Path>) -> Result<StepRecord> {
        let start = Instant::now();
        let s = self.step;
        let pairs = training_batch(&self.cfg, s)?;
        let mut mask_rng = substream(self.cfg.seeds.masks, Stream::Masks, s);
        let masks = self
            .model
            .sample_masks(pairs.len(), self.cfg.mask_ratio, &mut mask_rng)?;
        let lr = self.schedule.lr(s);

        let mut g = Graph::new();
        let out = self.model.loss(
            &mut g,
            &self.store,
            &frame_pairs(&pairs),
            &masks,
            PathControl::default(),
        )?;
        let loss = out.value.to_f64();
        if !loss.is_finite() {
            if let Some(dir) = out_dir {
                let dump = DivergenceDump {
                    step: s,
                    data_seed: self.cfg.seeds.data,
                    mask_seed: self.cfg.seeds.masks,
                    episodes: pairs.iter().map(|p| p.episode).collect(),
                    frames: pairs.iter().map(|p| [p.t, p.t + p.gap]).collect(),
                    masks,
                };
                fs::create_dir_all(dir)?;
                fs::write(
                    dir.join(format!("diverged_{s:06}.json")),
                    serde_json::to_vec_pretty(&dump)?,
                )?;
            }
            return Err(Error::Diverged {
                step: s,
                data_seed: self.cfg.seeds.data,
                mask_seed: self.cfg.seeds.masks,
            });
        }
        self.store.zero_grad();
        g.backward(out.loss, &mut self.store)?;
        self.optim.step(&mut self.store, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step: s,
            lr,
            loss,
            degenerate: out.degenerate,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    pub resume: Option<PathBuf>,
    pub force: bool,
    /// Stop once this many steps are complete (simulated interruption).
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub losses: Vec<f64>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.json"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.json")
}

/// Keeps the header and the rows of steps before `step`, so a resumed run
/// appends exactly where the checkpoint left off.
fn truncate_csv(path: &Path, header: &str, step: u64) -> Result<()> {
    let mut kept = vec![header.to_string()];
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            let row_step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Input(format!("malformed row in {}: {line}", path.display())))?;
            if row_step < step {
                kept.push(line);
            }
        }
    }
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

/// Trains `cfg` into `cfg.output_dir`: `metrics.csv` (step, lr, loss,
/// degenerate patch count), `timing.csv` (wall time per step, kept apart so
/// metrics stay byte-reproducible), periodic and final checkpoints.
pub fn pretrain<T: Scalar>(cfg: &RunConfig, opts: &PretrainOptions) -> Result<PretrainSummary> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::<T>::resume(cfg.clone(), &Checkpoint::load(path)?, opts.force)?,
        None => Trainer::<T>::new(cfg.clone())?,
    };
    cfg.save(&dir.join("config.json"))?;
    let metrics_path = dir.join("metrics.csv");
    let timing_path = dir.join("timing.csv");
    truncate_csv(&metrics_path, METRICS_HEADER, trainer.step())?;
    truncate_csv(&timing_path, TIMING_HEADER, trainer.step())?;
    let mut metrics = OpenOptions::new().append(true).open(&metrics_path)?;
    let mut timing = OpenOptions::new().append(true).open(&timing_path)?;

    let end = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let mut losses = Vec::new();
    while trainer.step() < end {
        let rec = trainer.train_step(Some(&dir))?;
        losses.push(rec.loss);
        if rec.step % cfg.log_interval == 0 {
            writeln!(metrics, "{},{},{},{}", rec.step, rec.lr, rec.loss, rec.degenerate)?;
            writeln!(timing, "{},{:.6}", rec.step, rec.seconds)?;
            log::info!("step {} lr {:.3e} loss {:.5}", rec.step, rec.lr, rec.loss);
        }
        let done = trainer.step();
        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.steps {
            trainer.checkpoint()?.save(&checkpoint_path(&dir, done))?;
        }
    }
    metrics.flush()?;
    let final_checkpoint = if trainer.step() == cfg.steps {
        final_checkpoint_path(&dir)
    } else {
        checkpoint_path(&dir, trainer.step())
    };
    trainer.checkpoint()?.save(&final_checkpoint)?;
    Ok(PretrainSummary {
        losses,
        final_checkpoint,
        metrics: metrics_path,
    })
}

/// Mean eval loss on held-out pairs with and without the bottleneck path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reliance {
    pub loss: f64,
    pub zeroed_loss: f64,
}

impl Reliance {
    /// Relative loss increase when the bottleneck is zeroed.
    pub fn delta(&self) -> f64 {
        (self.zeroed_loss - self.loss) / self.loss
    }
}

/// Evaluates `pairs_count` un-augmented held-out pairs (one per episode) in
/// chunks of the training batch size.
pub fn bottleneck_reliance<T: Scalar>(
    cfg: &RunConfig,
    model: &Model,
    store: &ParamStore<T>,
    pairs_count: usize,
    eval_seed: u64,
) -> Result<Reliance> {
    let mut rng = substream(eval_seed, Stream::Eval, 0);
    let mut pairs = Vec::with_capacity(pairs_count);
    for i in 0..pairs_count as u64 {
        pairs.push(sample_pair(&held_out_episode(cfg, i)?, cfg.scene.gap, false, &mut rng)?);
    }
    let masks = model.sample_masks(pairs.len(), cfg.mask_ratio, &mut rng)?;
    let (mut sum, mut zeroed, mut count) = (0.0, 0.0, 0usize);
    for (chunk, m) in pairs.chunks(cfg.batch_size).zip(masks.chunks(cfg.batch_size)) {
        let fp = frame_pairs(chunk);
        let off = PathControl {
            zero_bottleneck: true,
            ..PathControl::default()
        };
        let base = model.eval_loss(store, &fp, m, PathControl::default())?;
        let cut = model.eval_loss(store, &fp, m, off)?;
        sum += base.loss.to_f64() * base.distances.len() as f64;
        zeroed += cut.loss.to_f64() * cut.distances.len() as f64;
        count += base.distances.len();
    }
    Ok(Reliance {
        loss: sum / count as f64,
        zeroed_loss: zeroed / count as f64,
    })
}
