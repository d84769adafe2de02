//! Training objectives over frame pairs.
//!
//! * `tobo`: the reference frame is encoded in full and only its CLS output
//!   (the bottleneck token) reaches the decoder, which reconstructs the
//!   masked target patches from it plus the visible target tokens.
//! * `mae`: single-frame masked autoencoding of the target frame.
//! * `xattn`: target slots cross-attend to every reference spatial token.
//!
//! All three score predictions with the mean cosine distance over the
//! masked patches.

mod decoder;
mod loss;
mod mask;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{BottleneckDecoder, CrossDecoder};
pub use loss::{cosine_distance, tobo_loss, LossValue};
pub use mask::{mask_count, sample_mask, MaskSet};

use crate::imaging::Image;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::vit::{patchify, Encoder, EncoderConfig, PatchSet, TokenBatch};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Tobo,
    Mae,
    Xattn,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Tobo, Objective::Mae, Objective::Xattn];
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Tobo => "tobo",
            Objective::Mae => "mae",
            Objective::Xattn => "xattn",
        })
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tobo" => Ok(Objective::Tobo),
            "mae" => Ok(Objective::Mae),
            "xattn" => Ok(Objective::Xattn),
            other => Err(format!("unknown objective `{other}` (expected tobo, mae or xattn)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Learned positional embedding on the N grid slots.
    pub pos_embed: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DecoderConfig {
    pub fn desk() -> Self {
        DecoderConfig {
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            pos_embed: true,
        }
    }

    pub fn tiny() -> Self {
        DecoderConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            pos_embed: true,
        }
    }

    /// Eight blocks, MAE decoder width.
    pub fn paper() -> Self {
        DecoderConfig {
            dim: 512,
            depth: 8,
            heads: 16,
            mlp_ratio: 4,
            pos_embed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("decoder mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Reference and target frame of one training pair. MAE reads the target
/// frame only.
#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub reference: &'a Image,
    pub target: &'a Image,
}

/// Evaluation-time interventions on the information paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PathControl {
    /// Replace the bottleneck token (xattn: the reference tokens) by zeros.
    pub zero_bottleneck: bool,
    /// Stop gradients through the visible target tokens.
    pub detach_hints: bool,
    /// Stop gradients through the reference path.
    pub detach_reference: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: Var,
    /// `[sum |M|, 3p²]` predictions, sample by sample.
    pub predictions: Var,
    pub value: T,
    pub distances: Vec<T>,
    pub degenerate: usize,
}

#[derive(Debug, Clone)]
enum Decoder {
    Bottleneck(BottleneckDecoder),
    Cross(CrossDecoder),
}

/// Encoder plus the decoder of one objective.
#[derive(Debug, Clone)]
pub struct Model {
    objective: Objective,
    encoder: Encoder,
    decoder: Decoder,
}

impl Model {
    pub fn new<T: Scalar, R: Rng>(
        objective: Objective,
        encoder: EncoderConfig,
        decoder: &DecoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if objective != Objective::Xattn && !encoder.cls_enabled {
            return Err(Error::Config(format!("objective {objective} needs the CLS token")));
        }
        let (d, n, pd) = (encoder.embed_dim, encoder.num_patches(), encoder.patch_dim());
        let encoder = Encoder::new(encoder, store, rng)?;
        let decoder = match objective {
            Objective::Tobo | Objective::Mae => {
                Decoder::Bottleneck(BottleneckDecoder::new(decoder, store, d, n, pd, rng)?)
            }
            Objective::Xattn => Decoder::Cross(CrossDecoder::new(decoder, store, d, n, pd, rng)?),
        };
        Ok(Model {
            objective,
            encoder,
            decoder,
        })
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Decoder input length: N+1 with a bottleneck slot, N without.
    pub fn decoder_sequence_len(&self) -> usize {
        match &self.decoder {
            Decoder::Bottleneck(d) => d.sequence_len(),
            Decoder::Cross(d) => d.sequence_len(),
        }
    }

    /// One mask per pair, drawn in pair order.
    pub fn sample_masks<R: Rng>(&self, batch: usize, ratio: f64, rng: &mut R) -> Result<Vec<MaskSet>> {
        let n = self.encoder.config().num_patches();
        (0..batch).map(|_| sample_mask(n, ratio, rng)).collect()
    }

    /// Records the objective's forward pass and loss on `g`.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pairs: &[FramePair<'_>],
        masks: &[MaskSet],
        control: PathControl,
    ) -> Result<StepOutput<T>> {
        if pairs.is_empty() || pairs.len() != masks.len() {
            return Err(Error::Input(format!(
                "{} pairs with {} masks",
                pairs.len(),
                masks.len()
            )));
        }
        let cfg = self.encoder.config();
        let p = cfg.patch_size;
        let batch = pairs.len();
        let targets: Vec<PatchSet> = pairs.iter().map(|fp| patchify(fp.target, p)).collect::<Result<_>>()?;
        let mut visible = Vec::new();
        let mut visible_pos = Vec::new();
        let mut target_vals = Vec::new();
        for (ps, m) in targets.iter().zip(masks) {
            visible.extend(ps.select(&m.visible)?);
            visible_pos.extend_from_slice(&m.visible);
            target_vals.extend(ps.select(&m.masked)?);
        }
        let hints = input(g, visible, cfg.patch_dim())?;
        let hints = self.encoder.forward(g, store, hints, &visible_pos, batch)?;
        let mut hint_tokens = hints.spatial;
        if control.detach_hints {
            hint_tokens = g.detach(hint_tokens);
        }

        let predictions = match (&self.decoder, self.objective) {
            (Decoder::Bottleneck(dec), objective) => {
                let mut bottleneck = match objective {
                    Objective::Mae => hints.cls.expect("cls checked at construction"),
                    _ => {
                        let reference = self.encode_full(g, store, pairs)?;
                        reference.cls.expect("cls checked at construction")
                    }
                };
                if control.detach_reference {
                    bottleneck = g.detach(bottleneck);
                }
                if control.zero_bottleneck {
                    bottleneck = g.constant(Tensor::zeros(&[batch, cfg.embed_dim]))?;
                }
                dec.forward(g, store, bottleneck, hint_tokens, masks)?
            }
            (Decoder::Cross(dec), _) => {
                let mut reference = self.encode_full(g, store, pairs)?.spatial;
                if control.detach_reference {
                    reference = g.detach(reference);
                }
                if control.zero_bottleneck {
                    reference = g.constant(Tensor::zeros(&[batch * cfg.num_patches(), cfg.embed_dim]))?;
                }
                dec.forward(g, store, reference, hint_tokens, masks)?
            }
        };
        let target: Vec<T> = target_vals.into_iter().map(|v| T::from_f64(v as f64)).collect();
        let out = g.cosine_distance_loss(predictions, &target)?;
        Ok(StepOutput {
            loss: out.loss,
            predictions,
            value: g.scalar_value(out.loss),
            distances: out.distances,
            degenerate: out.degenerate,
        })
    }

    /// Loss without recording gradients for later use.
    pub fn eval_loss<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pairs: &[FramePair<'_>],
        masks: &[MaskSet],
        control: PathControl,
    ) -> Result<LossValue<T>> {
        let mut g = Graph::new();
        let out = self.loss(&mut g, store, pairs, masks, control)?;
        Ok(LossValue {
            loss: out.value,
            distances: out.distances,
            degenerate: out.degenerate,
        })
    }

    /// Reference frames encoded with all N patches.
    fn encode_full<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pairs: &[FramePair<'_>],
    ) -> Result<crate::vit::EncoderOutput> {
        let cfg = self.encoder.config();
        let n = cfg.num_patches();
        let mut data = Vec::with_capacity(pairs.len() * n * cfg.patch_dim());
        for fp in pairs {
            data.extend_from_slice(patchify(fp.reference, cfg.patch_size)?.data());
        }
        let positions: Vec<usize> = (0..pairs.len()).flat_map(|_| 0..n).collect();
        let x = input(g, data, cfg.patch_dim())?;
        self.encoder.forward(g, store, x, &positions, pairs.len())
    }
}

fn input<T: Scalar>(g: &mut Graph<T>, data: Vec<f32>, width: usize) -> Result<Var> {
    let rows = data.len() / width;
    Ok(g.input(
        vec![rows, width],
        data.into_iter().map(|v| T::from_f64(v as f64)).collect(),
    )?)
}

/// Encodes every patch of `image`; the CLS output is the bottleneck token.
pub fn squeeze<T: Scalar>(encoder: &Encoder, store: &ParamStore<T>, image: &Image) -> Result<TokenBatch<T>> {
    let cfg = encoder.config();
    let ps = patchify(image, cfg.patch_size)?;
    if ps.len() != cfg.num_patches() {
        return Err(Error::Input(format!(
            "{}x{} image for an encoder of extent {}",
            image.height(),
            image.width(),
            cfg.image_size
        )));
    }
    let positions: Vec<usize> = (0..ps.len()).collect();
    encoder.encode(store, ps.data(), &positions)
}
