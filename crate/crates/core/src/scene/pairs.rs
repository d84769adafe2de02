use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Episode, LabelMap, SceneConfig};
use crate::imaging::{CropBox, Image};
use crate::{Error, Result};

/// Crop box and flip shared by both frames of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub crop: CropBox,
    pub flip: bool,
}

impl Augmentation {
    pub fn identity(size: usize) -> Self {
        Augmentation {
            crop: CropBox::full(size, size),
            flip: false,
        }
    }

    /// Crop, resize to `out x out` (bilinear), then flip.
    pub fn apply(&self, image: &Image, out: usize) -> Image {
        let img = image.crop_resize(&self.crop, out, out);
        if self.flip {
            img.flip_horizontal()
        } else {
            img
        }
    }

    /// Same geometry on labels, nearest-neighbour.
    pub fn apply_labels(&self, labels: &LabelMap, out: usize) -> LabelMap {
        let l = labels.crop_resize(&self.crop, out, out);
        if self.flip {
            l.flip_horizontal()
        } else {
            l
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub reference: Image,
    pub target: Image,
    pub reference_labels: Option<LabelMap>,
    pub target_labels: Option<LabelMap>,
    pub episode: u64,
    pub t: usize,
    pub gap: usize,
    pub augmentation: Augmentation,
}

/// Draws `t` uniformly over the frames that admit the minimum gap, then
/// `k` uniformly over `[k_min, min(k_max, T - 1 - t)]`.
pub fn sample_frames<R: Rng>(frames: usize, gap: [usize; 2], rng: &mut R) -> Result<(usize, usize)> {
    let [kmin, kmax] = gap;
    if kmin == 0 || kmin > kmax {
        return Err(Error::Scene(format!("invalid gap range {gap:?}")));
    }
    if frames <= kmin {
        return Err(Error::Scene(format!("{frames} frames leave no pair with gap {kmin}")));
    }
    let t = rng.random_range(0..frames - kmin);
    let k = rng.random_range(kmin..=kmax.min(frames - 1 - t));
    Ok((t, k))
}

/// Renders a pair drawn by [`sample_frames`], without augmentation.
pub fn sample_pair<R: Rng>(episode: &Episode, gap: [usize; 2], with_labels: bool, rng: &mut R) -> Result<ScenePair> {
    let (t, k) = sample_frames(episode.frames(), gap, rng)?;
    let a = episode.render(t)?;
    let b = episode.render(t + k)?;
    Ok(ScenePair {
        reference: a.image,
        target: b.image,
        reference_labels: with_labels.then_some(a.labels),
        target_labels: with_labels.then_some(b.labels),
        episode: episode.index,
        t,
        gap: k,
        augmentation: Augmentation::identity(episode.config.size),
    })
}

/// Random resized crop with aspect ratio in `[3/4, 4/3]` and area fraction
/// in `cfg.crop_scale`, plus a coin-flip mirror when enabled.
fn random_augmentation<R: Rng>(cfg: &SceneConfig, src: usize, rng: &mut R) -> Result<Augmentation> {
    let area = (src * src) as f64;
    let s = src as f64;
    let log_ar = (0.75f64.ln(), (4.0f64 / 3.0).ln());
    let mut crop = None;
    for _ in 0..10 {
        let scale = rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
        let ar = rng.random_range(log_ar.0..=log_ar.1).exp();
        let w = (area * scale * ar).sqrt();
        let h = (area * scale / ar).sqrt();
        if w <= s && h <= s {
            crop = Some(CropBox {
                x0: rng.random_range(0.0..=s - w),
                y0: rng.random_range(0.0..=s - h),
                width: w,
                height: h,
            });
            break;
        }
    }
    let crop = crop.unwrap_or_else(|| CropBox::full(src, src));
    crop.validate(src, src)?;
    let flip = cfg.flip && rng.random_bool(0.5);
    Ok(Augmentation { crop, flip })
}

/// Applies one random crop and flip identically to both frames (and their
/// labels). The record in the result replays the transform from the input.
pub fn augment_pair<R: Rng>(pair: &ScenePair, cfg: &SceneConfig, rng: &mut R) -> Result<ScenePair> {
    let src = pair.reference.height();
    if pair.reference.width() != src || pair.target.height() != src || pair.target.width() != src {
        return Err(Error::Scene("pair frames must be square and of equal size".into()));
    }
    let aug = random_augmentation(cfg, src, rng)?;
    let out = cfg.size;
    Ok(ScenePair {
        reference: aug.apply(&pair.reference, out),
        target: aug.apply(&pair.target, out),
        reference_labels: pair.reference_labels.as_ref().map(|l| aug.apply_labels(l, out)),
        target_labels: pair.target_labels.as_ref().map(|l| aug.apply_labels(l, out)),
        augmentation: aug,
        ..pair.clone()
    })
}

/// `batch / factor` distinct episodes, each contributing `factor` pairs with
/// independently drawn frames and augmentations, grouped by episode.
pub fn batch_with_repeat<R: Rng>(
    episodes: &[Episode],
    batch: usize,
    factor: usize,
    cfg: &SceneConfig,
    rng: &mut R,
) -> Result<Vec<ScenePair>> {
    if factor == 0 || batch == 0 || !batch.is_multiple_of(factor) {
        return Err(Error::Config(format!(
            "batch {batch} is not a positive multiple of repeat factor {factor}"
        )));
    }
    let clips = batch / factor;
    if clips > episodes.len() {
        return Err(Error::Config(format!(
            "{clips} clips requested from {} episodes",
            episodes.len()
        )));
    }
    let chosen = rand::seq::index::sample(rng, episodes.len(), clips).into_vec();
    let mut out = Vec::with_capacity(batch);
    for i in chosen {
        for _ in 0..factor {
            let pair = sample_pair(&episodes[i], cfg.gap, false, rng)?;
            out.push(augment_pair(&pair, cfg, rng)?);
        }
    }
    Ok(out)
}
