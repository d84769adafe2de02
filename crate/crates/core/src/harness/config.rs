use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::objective::{DecoderConfig, Objective};
use crate::scene::SceneConfig;
use crate::tensor::{AdamWConfig, Precision};
use crate::vit::EncoderConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub weights: u64,
    pub data: u64,
    pub masks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        OptimConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            warmup_fraction: 0.05,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Everything a run depends on. Serialized as the JSON config file; fields
/// missing from a file take their desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub objective: Objective,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub scene: SceneConfig,
    pub mask_ratio: f64,
    pub repeat_factor: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub optim: OptimConfig,
    pub seeds: Seeds,
    /// Training episodes are drawn from indices `0..episode_pool`.
    pub episode_pool: u64,
    pub precision: Precision,
    pub deterministic: bool,
    pub output_dir: PathBuf,
    pub log_interval: u64,
    /// Periodic checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            objective: Objective::Tobo,
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
            scene: SceneConfig::default(),
            mask_ratio: 0.9,
            repeat_factor: 2,
            batch_size: 32,
            steps: 2000,
            optim: OptimConfig::default(),
            seeds: Seeds::default(),
            episode_pool: 100_000,
            precision: Precision::F32,
            deterministic: true,
            output_dir: PathBuf::from("runs/default"),
            log_interval: 1,
            checkpoint_interval: 500,
        }
    }
}

/// The fields of [`RunConfig`] that influence numerics; hashed into
/// checkpoints.
#[derive(Serialize)]
struct NumericView<'a> {
    objective: Objective,
    encoder: &'a EncoderConfig,
    decoder: &'a DecoderConfig,
    scene: &'a SceneConfig,
    mask_ratio: f64,
    repeat_factor: usize,
    batch_size: usize,
    steps: u64,
    optim: &'a OptimConfig,
    seeds: Seeds,
    episode_pool: u64,
    precision: Precision,
}

impl RunConfig {
    /// Gradient-check scale: 16x16 frames, 16 patches, width 16.
    pub fn tiny(objective: Objective) -> Self {
        RunConfig {
            objective,
            encoder: EncoderConfig::tiny(),
            decoder: DecoderConfig::tiny(),
            scene: SceneConfig {
                size: 16,
                radius: [2.0, 3.0],
                ..SceneConfig::default()
            },
            mask_ratio: 0.75,
            batch_size: 2,
            steps: 1,
            precision: Precision::F64,
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.scene.validate()?;
        if self.scene.size != self.encoder.image_size {
            return Err(Error::Config(format!(
                "scene size {} differs from encoder image size {}",
                self.scene.size, self.encoder.image_size
            )));
        }
        crate::objective::mask_count(self.encoder.num_patches(), self.mask_ratio)?;
        if self.repeat_factor == 0 || self.batch_size == 0 || !self.batch_size.is_multiple_of(self.repeat_factor) {
            return Err(Error::Config(format!(
                "batch size {} must be a positive multiple of repeat factor {}",
                self.batch_size, self.repeat_factor
            )));
        }
        if (self.batch_size / self.repeat_factor) as u64 > self.episode_pool {
            return Err(Error::Config("episode pool smaller than the clips per batch".into()));
        }
        if self.steps == 0 || self.log_interval == 0 {
            return Err(Error::Config("steps and log_interval must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if !(o.weight_decay >= 0.0 && (0.0..=1.0).contains(&o.warmup_fraction)) {
            return Err(Error::Config("invalid weight decay or warmup fraction".into()));
        }
        Ok(())
    }

    /// Hash over every field that changes numerics (not output paths or
    /// logging cadence).
    pub fn hash(&self) -> Result<String> {
        crate::digest::json_hash(&NumericView {
            objective: self.objective,
            encoder: &self.encoder,
            decoder: &self.decoder,
            scene: &self.scene,
            mask_ratio: self.mask_ratio,
            repeat_factor: self.repeat_factor,
            batch_size: self.batch_size,
            steps: self.steps,
            optim: &self.optim,
            seeds: self.seeds,
            episode_pool: self.episode_pool,
            precision: self.precision,
        })
    }
}
