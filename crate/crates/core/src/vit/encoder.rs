use rand::Rng;

use super::{EncoderConfig, Linear, Norm, TransformerBlock, INIT_STD};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Shared patch encoder: linear patch embedding, learned positional
/// embedding per grid cell, optional CLS token, pre-norm blocks and a
/// final layer norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch_embed: Linear,
    pos_embed: ParamId,
    cls: Option<ParamId>,
    blocks: Vec<TransformerBlock>,
    norm: Norm,
}

/// Graph handles produced by [`Encoder::forward`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[batch, d]`, present iff the CLS token is enabled.
    pub cls: Option<Var>,
    /// `[batch * tokens, d]`, rows in the order the patches were supplied.
    pub spatial: Var,
    pub batch: usize,
    pub tokens: usize,
}

/// Encoder outputs for one image, detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<T> {
    /// `[n, d]` spatial tokens.
    pub spatial: Tensor<T>,
    pub positions: Vec<usize>,
    pub cls: Option<Vec<T>>,
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder";

    pub fn new<T: Scalar, R: Rng>(cfg: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let pre = Self::PREFIX;
        let patch_embed = Linear::new(store, &format!("{pre}.patch_embed"), cfg.patch_dim(), d, rng)?;
        let pos_embed = store.add_init(
            format!("{pre}.pos_embed"),
            &[cfg.num_patches(), d],
            Init::TruncNormal(INIT_STD),
            false,
            rng,
        )?;
        let cls = if cfg.cls_enabled {
            Some(store.add_init(format!("{pre}.cls"), &[1, d], Init::TruncNormal(INIT_STD), false, rng)?)
        } else {
            None
        };
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("{pre}.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let norm = Norm::new(store, &format!("{pre}.norm"), d, rng)?;
        Ok(Encoder {
            cfg,
            patch_embed,
            pos_embed,
            cls,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    pub fn patch_embed(&self) -> &Linear {
        &self.patch_embed
    }

    /// Encodes `batch` samples with the same number of patches each.
    ///
    /// `patches` is `[batch * n, 3p²]` and `positions[j]` is the grid cell
    /// of row `j`. Within each sample the tokens are processed in position
    /// order, so permuting the supplied (patch, position) pairs permutes the
    /// spatial outputs and leaves the CLS output unchanged, bit for bit.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
        positions: &[usize],
        batch: usize,
    ) -> Result<EncoderOutput> {
        let rows = g.rows(patches);
        if batch == 0 || rows == 0 || positions.len() != rows || !rows.is_multiple_of(batch) {
            return Err(Error::Input(format!(
                "{rows} patch rows with {} positions for a batch of {batch}",
                positions.len()
            )));
        }
        if g.cols(patches) != self.cfg.patch_dim() {
            return Err(Error::Input(format!(
                "patch width {} for patch dimension {}",
                g.cols(patches),
                self.cfg.patch_dim()
            )));
        }
        let n = rows / batch;
        let grid = self.cfg.num_patches();
        let mut order = Vec::with_capacity(rows);
        for b in 0..batch {
            let sample = &positions[b * n..(b + 1) * n];
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| sample[i]);
            for w in idx.windows(2) {
                if sample[w[0]] == sample[w[1]] {
                    return Err(Error::Input(format!("duplicate patch position {}", sample[w[0]])));
                }
            }
            if let Some(&last) = idx.last() {
                if sample[last] >= grid {
                    return Err(Error::Input(format!(
                        "patch position {} outside grid of {grid}",
                        sample[last]
                    )));
                }
            }
            order.extend(idx.into_iter().map(|i| b * n + i));
        }

        let sorted = g.gather_rows(&[patches], &order.iter().map(|&r| (0, r)).collect::<Vec<_>>())?;
        let x = self.patch_embed.forward(g, store, sorted)?;
        let pos = g.param(store, self.pos_embed);
        let pos = g.gather_rows(&[pos], &order.iter().map(|&r| (0, positions[r])).collect::<Vec<_>>())?;
        let mut x = g.add(x, pos)?;

        let seq = n + usize::from(self.cls.is_some());
        if let Some(cls) = self.cls {
            let cls = g.param(store, cls);
            let mut picks = Vec::with_capacity(batch * seq);
            for b in 0..batch {
                picks.push((0, 0));
                picks.extend((0..n).map(|i| (1, b * n + i)));
            }
            x = g.gather_rows(&[cls, x], &picks)?;
        }
        for block in &self.blocks {
            x = block.forward(g, store, x, batch)?;
        }
        let x = self.norm.forward(g, store, x)?;

        let offset = seq - n;
        let cls = match self.cls {
            Some(_) => Some(g.gather_rows(&[x], &(0..batch).map(|b| (0, b * seq)).collect::<Vec<_>>())?),
            None => None,
        };
        let mut back = vec![(0, 0); rows];
        for (rank, &r) in order.iter().enumerate() {
            let (b, i) = (rank / n, rank % n);
            back[r] = (0, b * seq + offset + i);
        }
        let spatial = g.gather_rows(&[x], &back)?;
        Ok(EncoderOutput {
            cls,
            spatial,
            batch,
            tokens: n,
        })
    }

    /// Gradient-free encoding of one image's patches (flat, `n * 3p²`).
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        patches: &[f32],
        positions: &[usize],
    ) -> Result<TokenBatch<T>> {
        if positions.is_empty() {
            return Err(Error::Input("no patches to encode".into()));
        }
        let mut g = Graph::new();
        let data = patches.iter().map(|&v| T::from_f64(v as f64)).collect();
        let x = g.input(vec![positions.len(), self.cfg.patch_dim()], data)?;
        let out = self.forward(&mut g, store, x, positions, 1)?;
        Ok(TokenBatch {
            spatial: g.tensor(out.spatial),
            positions: positions.to_vec(),
            cls: out.cls.map(|c| g.value(c).to_vec()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn setup(cfg: EncoderConfig) -> (Encoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = substream(3, Stream::Weights, 0);
        let enc = Encoder::new(cfg, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn patches(n: usize, dim: usize) -> Vec<f32> {
        (0..n * dim).map(|i| ((i * 37) % 101) as f32 / 101.0).collect()
    }

    #[test]
    fn seven_patches_give_eight_tokens() {
        let cfg = EncoderConfig::tiny();
        let (enc, store) = setup(cfg.clone());
        let pos = [0, 2, 3, 5, 8, 13, 15];
        let out = enc.encode(&store, &patches(7, cfg.patch_dim()), &pos).unwrap();
        assert_eq!(out.spatial.shape(), &[7, cfg.embed_dim]);
        assert_eq!(out.cls.unwrap().len(), cfg.embed_dim);
    }

    #[test]
    fn cls_absent_when_disabled() {
        let cfg = EncoderConfig {
            cls_enabled: false,
            ..EncoderConfig::tiny()
        };
        let (enc, store) = setup(cfg.clone());
        let out = enc.encode(&store, &patches(3, cfg.patch_dim()), &[1, 4, 9]).unwrap();
        assert!(out.cls.is_none());
        assert_eq!(out.spatial.rows(), 3);
    }

    #[test]
    fn rejects_bad_positions() {
        let cfg = EncoderConfig::tiny();
        let (enc, store) = setup(cfg.clone());
        let p = patches(2, cfg.patch_dim());
        assert!(enc.encode(&store, &p, &[3, 3]).is_err());
        assert!(enc.encode(&store, &p, &[3, 16]).is_err());
        assert!(enc.encode(&store, &[], &[]).is_err());
    }
}
