//! Frozen-encoder evaluations: label propagation and the state probe.

pub mod probe;
pub mod propagation;

use crate::imaging::Image;
use crate::tensor::{Graph, ParamStore, Scalar};
use crate::vit::{patchify, Encoder};
use crate::{Error, Result};

pub use probe::{
    build_probe_dataset, eval_probe, probe_targets, r_squared, train_probe, write_probe_row, ProbeConfig, ProbeDataset,
    ProbeMetrics, ProbeModel, ProbeSample, PROBE_HEADER, PROBE_TARGETS,
};
pub use propagation::{
    best_point, dense_features, episode_features, miou, propagate, propagate_episode, run_propagation, sweep,
    write_sweep_csv, ContextQueue, EpisodeFeatures, FeatureGrid, PropagationGrid, PropagationParams, PropagationResult,
    SoftLabels, SweepRow, SWEEP_HEADER,
};

/// Final-layer outputs of one frame, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens {
    pub cls: Option<Vec<f64>>,
    /// `[n, d]` row-major, patch order.
    pub spatial: Vec<f64>,
}

/// Frames encoded per forward pass; results do not depend on it.
const ENCODE_CHUNK: usize = 16;

/// Encodes every patch of each frame without recording gradients.
pub fn encode_frames<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    frames: &[Image],
) -> Result<Vec<FrameTokens>> {
    let cfg = encoder.config();
    let (n, d) = (cfg.num_patches(), cfg.embed_dim);
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(ENCODE_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * n * cfg.patch_dim());
        for img in chunk {
            let ps = patchify(img, cfg.patch_size)?;
            if ps.len() != n {
                return Err(Error::Input(format!(
                    "{}x{} frame for an encoder of extent {}",
                    img.height(),
                    img.width(),
                    cfg.image_size
                )));
            }
            data.extend(ps.data().iter().map(|&v| T::from_f64(v as f64)));
        }
        let positions: Vec<usize> = (0..chunk.len()).flat_map(|_| 0..n).collect();
        let mut g = Graph::new();
        let x = g.input(vec![chunk.len() * n, cfg.patch_dim()], data)?;
        let enc = encoder.forward(&mut g, store, x, &positions, chunk.len())?;
        let spatial = g.value(enc.spatial);
        let cls = enc.cls.map(|c| g.value(c).to_vec());
        for i in 0..chunk.len() {
            out.push(FrameTokens {
                cls: cls
                    .as_ref()
                    .map(|c| c[i * d..(i + 1) * d].iter().map(|&v| Scalar::to_f64(v)).collect()),
                spatial: spatial[i * n * d..(i + 1) * n * d]
                    .iter()
                    .map(|&v| Scalar::to_f64(v))
                    .collect(),
            });
        }
    }
    Ok(out)
}
