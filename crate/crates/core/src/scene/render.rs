use serde::{Deserialize, Serialize};

use super::Episode;
use crate::imaging::{CropBox, Image};
use crate::{Error, Result};

/// Per-pixel instance labels: 0 is background, `k + 1` is sprite `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Input(format!(
                "{height}x{width} label map with {} values",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        out.data.chunks_mut(self.width).for_each(<[u16]>::reverse);
        out
    }

    /// Nearest-neighbour resample of `crop` to `out_h x out_w`.
    pub fn crop_resize(&self, crop: &CropBox, out_h: usize, out_w: usize) -> LabelMap {
        let mut data = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            for j in 0..out_w {
                let (y, x) = crop.nearest(i, j, out_h, out_w, self.height, self.width);
                data.push(self.get(y, x));
            }
        }
        LabelMap {
            height: out_h,
            width: out_w,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: Image,
    pub labels: LabelMap,
    /// Per sprite `(x, y, vx, vy)`.
    pub state: Vec<f64>,
}

pub(super) fn render(ep: &Episode, t: usize) -> Rendered {
    let size = ep.config.size;
    let cell = ep.config.checker_cell;
    let [ox, oy] = ep.background.offset;
    let mut image = Image::filled(size, size, [0.0; 3]);
    let mut labels = vec![0u16; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let top = ep.sprites.iter().enumerate().rev().find(|(_, s)| {
                let [cx, cy] = s.centers[t];
                s.shape.contains(px - cx, py - cy, s.radius)
            });
            let rgb = match top {
                Some((k, s)) => {
                    labels[y * size + x] = k as u16 + 1;
                    s.color
                }
                None => {
                    let g = ep.background.levels[((x + ox) / cell + (y + oy) / cell) % 2];
                    [g; 3]
                }
            };
            image.set_pixel(y, x, rgb.map(|c| c as f32 / 255.0));
        }
    }
    let state = ep.state_at(t);
    Rendered {
        image,
        labels: LabelMap {
            height: size,
            width: size,
            data: labels,
        },
        state,
    }
}
