//! Vision transformer pieces: patchification, pre-norm transformer blocks
//! and the shared encoder with a learnable CLS token.

mod block;
mod encoder;

use serde::{Deserialize, Serialize};

pub use block::{CrossBlock, Linear, Norm, TransformerBlock};
pub use encoder::{Encoder, EncoderOutput, TokenBatch};

use crate::imaging::{Image, CHANNELS};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub cls_enabled: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// 32x32 input, 4x4 patches, width 64, four blocks of four heads.
    pub fn desk() -> Self {
        EncoderConfig {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 4,
            image_size: 32,
            cls_enabled: true,
        }
    }

    /// 16 patches of width 16; small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
            image_size: 16,
            cls_enabled: true,
        }
    }

    /// ViT-S/16 at 224 pixels.
    pub fn vit_small() -> Self {
        EncoderConfig {
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            patch_size: 16,
            image_size: 224,
            cls_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }
}

/// Non-overlapping patches in raster order. Each patch vector lists its
/// pixels row by row with the three channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    data: Vec<f32>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Concatenated vectors of the patches at `positions`, in that order.
    pub fn select(&self, positions: &[usize]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(positions.len() * self.patch_dim());
        for &p in positions {
            if p >= self.len() {
                return Err(Error::Input(format!("patch {p} out of range ({})", self.len())));
            }
            out.extend_from_slice(self.patch(p));
        }
        Ok(out)
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchSet> {
    let (h, w) = (image.height(), image.width());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Input(format!(
            "{h}x{w} image is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let mut data = Vec::with_capacity(CHANNELS * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let (y, x) = (gy * patch_size + dy, gx * patch_size + dx);
                    for c in 0..CHANNELS {
                        data.push(image.get(c, y, x));
                    }
                }
            }
        }
    }
    Ok(PatchSet {
        patch_size,
        grid_h: gh,
        grid_w: gw,
        data,
    })
}

pub fn unpatchify(patches: &PatchSet) -> Image {
    let p = patches.patch_size;
    let (h, w) = (patches.grid_h * p, patches.grid_w * p);
    let mut img = Image::filled(h, w, [0.0; 3]);
    for gy in 0..patches.grid_h {
        for gx in 0..patches.grid_w {
            let v = patches.patch(gy * patches.grid_w + gx);
            for dy in 0..p {
                for dx in 0..p {
                    let o = (dy * p + dx) * CHANNELS;
                    img.set_pixel(gy * p + dy, gx * p + dx, [v[o], v[o + 1], v[o + 2]]);
                }
            }
        }
    }
    img
}
