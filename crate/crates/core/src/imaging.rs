//! Minimal RGB image container (channel-major, values in [0, 1]) and the
//! crop/resample routines used by augmentation.

use crate::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::Input(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[(c * self.height + y) * self.width + x] = v;
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..CHANNELS {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    /// Bilinear resample of `crop` to `out_h x out_w`, sampling pixel centres
    /// and clamping at the borders.
    pub fn crop_resize(&self, crop: &CropBox, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::filled(out_h, out_w, [0.0; 3]);
        let sy = crop.height / out_h as f64;
        let sx = crop.width / out_w as f64;
        for i in 0..out_h {
            let fy = (crop.y0 + (i as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for j in 0..out_w {
                let fx = (crop.x0 + (j as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                for c in 0..CHANNELS {
                    let top = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let bot = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    out.data[(c * out_h + i) * out_w + j] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        out
    }
}

/// Axis-aligned crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        CropBox {
            x0: 0.0,
            y0: 0.0,
            width: width as f64,
            height: height as f64,
        }
    }

    /// Rejects boxes smaller than a pixel or reaching outside the source.
    pub fn validate(&self, src_h: usize, src_w: usize) -> Result<()> {
        let ok = self.width >= 1.0
            && self.height >= 1.0
            && self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x0 + self.width <= src_w as f64 + 1e-9
            && self.y0 + self.height <= src_h as f64 + 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "degenerate crop box {self:?} for {src_h}x{src_w}"
            )))
        }
    }

    /// Source index sampled by nearest-neighbour output pixel `(i, j)`.
    pub fn nearest(
        &self,
        i: usize,
        j: usize,
        out_h: usize,
        out_w: usize,
        src_h: usize,
        src_w: usize,
    ) -> (usize, usize) {
        let y = (self.y0 + (i as f64 + 0.5) * self.height / out_h as f64).floor() as usize;
        let x = (self.x0 + (j as f64 + 0.5) * self.width / out_w as f64).floor() as usize;
        (y.min(src_h - 1), x.min(src_w - 1))
    }
}
