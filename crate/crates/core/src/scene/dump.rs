use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Episode, LabelMap, SceneConfig};
use crate::imaging::Image;
use crate::{Error, Result};

pub const DUMP_VERSION: u32 = 1;

/// `manifest.json` of a dumped episode directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprites: usize,
    pub seed: u64,
    pub index: u64,
    pub config_hash: String,
    pub config: SceneConfig,
    /// `frame_NNNN.png`, 8-bit RGB.
    pub frame_files: Vec<String>,
    /// `labels_NNNN.bin`, row-major little-endian u16.
    pub label_files: Vec<String>,
}

/// Writes every frame of `episode` into `dir` (created if missing).
pub fn dump_episode(episode: &Episode, dir: &Path) -> Result<EpisodeManifest> {
    fs::create_dir_all(dir)?;
    let size = episode.config.size;
    let mut frame_files = Vec::with_capacity(episode.frames());
    let mut label_files = Vec::with_capacity(episode.frames());
    for t in 0..episode.frames() {
        let r = episode.render(t)?;
        let frame = format!("frame_{t:04}.png");
        let mut rgb = image::RgbImage::new(size as u32, size as u32);
        for (x, y, px) in rgb.enumerate_pixels_mut() {
            let p = r.image.pixel(y as usize, x as usize);
            *px = image::Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        rgb.save_with_format(dir.join(&frame), image::ImageFormat::Png)?;
        let labels = format!("labels_{t:04}.bin");
        let bytes: Vec<u8> = r.labels.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&labels), bytes)?;
        frame_files.push(frame);
        label_files.push(labels);
    }
    let manifest = EpisodeManifest {
        format_version: DUMP_VERSION,
        height: size,
        width: size,
        frames: episode.frames(),
        sprites: episode.sprites.len(),
        seed: episode.seed,
        index: episode.index,
        config_hash: episode.config.hash()?,
        config: episode.config.clone(),
        frame_files,
        label_files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_frame(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::filled(h, w, [0.0; 3]);
    for (x, y, px) in rgb.enumerate_pixels() {
        img.set_pixel(y as usize, x as usize, px.0.map(|v| v as f32 / 255.0));
    }
    Ok(img)
}

pub fn load_labels(path: &Path, height: usize, width: usize) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    if bytes.len() != 2 * height * width {
        return Err(Error::Input(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            2 * height * width
        )));
    }
    let data = bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    LabelMap::new(height, width, data)
}
