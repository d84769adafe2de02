use rand::Rng;

use super::{DecoderConfig, MaskSet};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Scalar, Var};
use crate::vit::{CrossBlock, Linear, Norm, TransformerBlock, INIT_STD};
use crate::{Error, Result};

const PREFIX: &str = "decoder";

/// Checks the masks of a batch agree on `n` and on their visible count.
fn check_masks(masks: &[MaskSet], n: usize) -> Result<(usize, usize)> {
    let first = masks.first().ok_or_else(|| Error::Mask("empty batch".into()))?;
    let (nv, nm) = (first.visible.len(), first.masked.len());
    for m in masks {
        if m.n != n {
            return Err(Error::Mask(format!("mask over {} positions for a grid of {n}", m.n)));
        }
        if m.visible.len() != nv {
            return Err(Error::Mask("masks in one batch differ in size".into()));
        }
    }
    if nm == 0 {
        return Err(Error::Mask("nothing to predict: the masked set is empty".into()));
    }
    Ok((nv, nm))
}

/// Shared pieces of both decoders: token embedding, mask token, positional
/// embedding and the prediction head.
#[derive(Debug, Clone)]
struct Slots {
    embed: Linear,
    mask_token: ParamId,
    pos_embed: Option<ParamId>,
    norm: Norm,
    head: Linear,
    n: usize,
}

impl Slots {
    fn new<T: Scalar, R: Rng>(
        cfg: &DecoderConfig,
        store: &mut ParamStore<T>,
        encoder_dim: usize,
        n: usize,
        patch_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.dim;
        Ok(Slots {
            embed: Linear::new(store, &format!("{PREFIX}.embed"), encoder_dim, d, rng)?,
            mask_token: store.add_init(
                format!("{PREFIX}.mask_token"),
                &[1, d],
                Init::TruncNormal(INIT_STD),
                false,
                rng,
            )?,
            pos_embed: if cfg.pos_embed {
                Some(store.add_init(
                    format!("{PREFIX}.pos_embed"),
                    &[n, d],
                    Init::TruncNormal(INIT_STD),
                    false,
                    rng,
                )?)
            } else {
                None
            },
            norm: Norm::new(store, &format!("{PREFIX}.norm"), d, rng)?,
            head: Linear::new(store, &format!("{PREFIX}.head"), d, patch_dim, rng)?,
            n,
        })
    }

    /// `[batch * n, d]` grid slots: embedded visible tokens at visible
    /// positions, the mask token elsewhere, plus positional embeddings.
    fn grid<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, visible: Var, masks: &[MaskSet]) -> Result<Var> {
        let (nv, _) = check_masks(masks, self.n)?;
        if g.rows(visible) != masks.len() * nv {
            return Err(Error::Input(format!(
                "{} visible tokens for {} masks with {nv} hints",
                g.rows(visible),
                masks.len()
            )));
        }
        let vis = self.embed.forward(g, store, visible)?;
        let mask = g.param(store, self.mask_token);
        let mut picks = Vec::with_capacity(masks.len() * self.n);
        for (b, m) in masks.iter().enumerate() {
            let mut slot = vec![(0, 0); self.n];
            for (j, &p) in m.visible.iter().enumerate() {
                slot[p] = (1, b * nv + j);
            }
            picks.extend(slot);
        }
        let x = g.gather_rows(&[mask, vis], &picks)?;
        match self.pos_embed {
            Some(pos) => {
                let pos = g.param(store, pos);
                let tiled: Vec<_> = (0..masks.len() * self.n).map(|i| (0, i % self.n)).collect();
                let pos = g.gather_rows(&[pos], &tiled)?;
                Ok(g.add(x, pos)?)
            }
            None => Ok(x),
        }
    }

    /// Prediction head applied at the masked slots, in mask order.
    fn predict<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        masks: &[MaskSet],
        seq: usize,
        offset: usize,
    ) -> Result<Var> {
        let x = self.norm.forward(g, store, x)?;
        let picks: Vec<_> = masks
            .iter()
            .enumerate()
            .flat_map(|(b, m)| m.masked.iter().map(move |&p| (0, b * seq + offset + p)))
            .collect();
        let x = g.gather_rows(&[x], &picks)?;
        Ok(self.head.forward(g, store, x)?)
    }
}

/// Self-attention decoder over `[bottleneck] ++ N grid slots`.
#[derive(Debug, Clone)]
pub struct BottleneckDecoder {
    slots: Slots,
    bottleneck: Linear,
    blocks: Vec<TransformerBlock>,
}

impl BottleneckDecoder {
    pub fn new<T: Scalar, R: Rng>(
        cfg: &DecoderConfig,
        store: &mut ParamStore<T>,
        encoder_dim: usize,
        n: usize,
        patch_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let slots = Slots::new(cfg, store, encoder_dim, n, patch_dim, rng)?;
        let bottleneck = Linear::new(store, &format!("{PREFIX}.bottleneck"), encoder_dim, cfg.dim, rng)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("{PREFIX}.blocks.{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BottleneckDecoder {
            slots,
            bottleneck,
            blocks,
        })
    }

    pub fn sequence_len(&self) -> usize {
        self.slots.n + 1
    }

    /// Predicts the masked patches of every sample: `[sum |M|, 3p²]` rows,
    /// sample by sample in ascending position order.
    ///
    /// `bottleneck` is `[batch, d_enc]`; `visible` holds each sample's
    /// visible tokens in the order of `mask.visible`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bottleneck: Var,
        visible: Var,
        masks: &[MaskSet],
    ) -> Result<Var> {
        let batch = masks.len();
        if g.rows(bottleneck) != batch {
            return Err(Error::Input(format!(
                "{} bottleneck tokens for {batch} masks",
                g.rows(bottleneck)
            )));
        }
        let grid = self.slots.grid(g, store, visible, masks)?;
        let bn = self.bottleneck.forward(g, store, bottleneck)?;
        let n = self.slots.n;
        let seq = n + 1;
        let mut picks = Vec::with_capacity(batch * seq);
        for b in 0..batch {
            picks.push((0, b));
            picks.extend((0..n).map(|i| (1, b * n + i)));
        }
        let mut x = g.gather_rows(&[bn, grid], &picks)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, batch)?;
        }
        self.slots.predict(g, store, x, masks, seq, 1)
    }
}

/// Correspondence decoder: target slots attend to the reference spatial
/// tokens through cross-attention. No bottleneck slot.
#[derive(Debug, Clone)]
pub struct CrossDecoder {
    slots: Slots,
    memory: Linear,
    blocks: Vec<CrossBlock>,
}

impl CrossDecoder {
    pub fn new<T: Scalar, R: Rng>(
        cfg: &DecoderConfig,
        store: &mut ParamStore<T>,
        encoder_dim: usize,
        n: usize,
        patch_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let slots = Slots::new(cfg, store, encoder_dim, n, patch_dim, rng)?;
        let memory = Linear::new(store, &format!("{PREFIX}.memory"), encoder_dim, cfg.dim, rng)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                CrossBlock::new(
                    store,
                    &format!("{PREFIX}.blocks.{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CrossDecoder { slots, memory, blocks })
    }

    pub fn sequence_len(&self) -> usize {
        self.slots.n
    }

    /// `reference` is `[batch * N, d_enc]`, all reference spatial tokens in
    /// raster order.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        reference: Var,
        visible: Var,
        masks: &[MaskSet],
    ) -> Result<Var> {
        let batch = masks.len();
        if !g.rows(reference).is_multiple_of(batch.max(1)) {
            return Err(Error::Input(
                "reference tokens do not split evenly over the batch".into(),
            ));
        }
        let mut x = self.slots.grid(g, store, visible, masks)?;
        let mem = self.memory.forward(g, store, reference)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, mem, batch)?;
        }
        self.slots.predict(g, store, x, masks, self.slots.n, 0)
    }
}
