use std::collections::{BTreeSet, VecDeque};
use std::io::Write;

use super::encode_frames;
use crate::imaging::Image;
use crate::scene::{Episode, LabelMap};
use crate::tensor::{ParamStore, Scalar};
use crate::vit::Encoder;
use crate::{Error, Result};

/// Token grid of one frame, each cell an L2-normalized feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    /// Normalizes each of the `rows * cols` rows of `tokens`.
    pub fn from_tokens(rows: usize, cols: usize, dim: usize, mut tokens: Vec<f64>) -> Result<Self> {
        if tokens.len() != rows * cols * dim || dim == 0 {
            return Err(Error::Input(format!(
                "{} values for a {rows}x{cols} grid of width {dim}",
                tokens.len()
            )));
        }
        for cell in tokens.chunks_exact_mut(dim) {
            let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            cell.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(FeatureGrid {
            rows,
            cols,
            dim,
            data: tokens,
        })
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * self.cols + j) * self.dim;
        &self.data[at..at + self.dim]
    }
}

/// Per-pixel class distributions stored cell by cell: every grid cell holds
/// the `sub x sub` pixels it covers, so propagation keeps sub-cell shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels {
    pub rows: usize,
    pub cols: usize,
    pub sub: usize,
    pub classes: usize,
    data: Vec<f64>,
}

impl SoftLabels {
    /// One-hot encoding of `labels` on a grid of `sub`-pixel cells.
    pub fn from_labels(labels: &LabelMap, sub: usize, classes: usize) -> Result<Self> {
        if sub == 0 || !labels.height.is_multiple_of(sub) || !labels.width.is_multiple_of(sub) {
            return Err(Error::Input(format!(
                "{}x{} labels do not tile into {sub}-pixel cells",
                labels.height, labels.width
            )));
        }
        if labels.max_label() as usize >= classes {
            return Err(Error::Input(format!(
                "label {} with {classes} classes",
                labels.max_label()
            )));
        }
        let (rows, cols) = (labels.height / sub, labels.width / sub);
        let mut out = SoftLabels {
            rows,
            cols,
            sub,
            classes,
            data: vec![0.0; rows * cols * sub * sub * classes],
        };
        for y in 0..labels.height {
            for x in 0..labels.width {
                let at = out.offset(y / sub, x / sub) + ((y % sub) * sub + x % sub) * classes;
                out.data[at + labels.get(y, x) as usize] = 1.0;
            }
        }
        Ok(out)
    }

    fn cell_len(&self) -> usize {
        self.sub * self.sub * self.classes
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        (i * self.cols + j) * self.cell_len()
    }

    /// Distributions of the pixels of cell `(i, j)`, `sub² x classes`.
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let at = self.offset(i, j);
        &self.data[at..at + self.cell_len()]
    }

    /// Distribution of pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let s = self.sub;
        let at = self.offset(y / s, x / s) + ((y % s) * s + x % s) * self.classes;
        &self.data[at..at + self.classes]
    }

    /// Argmax per pixel; ties go to the lower label.
    pub fn to_hard(&self) -> LabelMap {
        let (h, w) = (self.rows * self.sub, self.cols * self.sub);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let p = self.pixel(y, x);
                let mut best = 0;
                for (c, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = c;
                    }
                }
                data.push(best as u16);
            }
        }
        LabelMap::new(h, w, data).expect("extent matches data")
    }
}

/// Past frames available as propagation sources: the pinned first frame plus
/// up to `m` most recent ones.
#[derive(Debug, Clone)]
pub struct ContextQueue {
    m: usize,
    first: (FeatureGrid, SoftLabels),
    recent: VecDeque<(FeatureGrid, SoftLabels)>,
}

impl ContextQueue {
    pub fn new(features: FeatureGrid, labels: SoftLabels, m: usize) -> Result<Self> {
        check_extent(&features, &labels)?;
        Ok(ContextQueue {
            m,
            first: (features, labels),
            recent: VecDeque::with_capacity(m),
        })
    }

    /// Adds a frame, evicting the oldest non-pinned entry beyond `m`.
    pub fn push(&mut self, features: FeatureGrid, labels: SoftLabels) -> Result<()> {
        check_extent(&features, &labels)?;
        if self.m == 0 {
            return Ok(());
        }
        if self.recent.len() == self.m {
            self.recent.pop_front();
        }
        self.recent.push_back((features, labels));
        Ok(())
    }

    pub fn len(&self) -> usize {
        1 + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// First frame, then recent frames oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &(FeatureGrid, SoftLabels)> {
        std::iter::once(&self.first).chain(self.recent.iter())
    }
}

fn check_extent(f: &FeatureGrid, l: &SoftLabels) -> Result<()> {
    if f.rows != l.rows || f.cols != l.cols {
        return Err(Error::Input(format!(
            "{}x{} features with {}x{} labels",
            f.rows, f.cols, l.rows, l.cols
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationParams {
    pub k: usize,
    /// Chebyshev radius in grid cells; `None` is unbounded.
    pub radius: Option<usize>,
    pub tau: f64,
    pub m: usize,
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams {
            k: 5,
            radius: Some(2),
            tau: 0.07,
            m: 4,
        }
    }
}

/// Soft labels of `current`: each cell blends the labels of its top-`k`
/// most similar queued cells within `radius`, weighted by a softmax of
/// cosine similarity over `tau`. Equal similarities keep queue order.
pub fn propagate(queue: &ContextQueue, current: &FeatureGrid, params: &PropagationParams) -> Result<SoftLabels> {
    if params.k == 0 || !(params.tau > 0.0) {
        return Err(Error::Input("k must be at least 1 and tau positive".into()));
    }
    let (first_f, first_l) = &queue.first;
    if current.rows != first_f.rows || current.cols != first_f.cols || current.dim != first_f.dim {
        return Err(Error::Input("current frame grid differs from the queue".into()));
    }
    let (rows, cols) = (current.rows, current.cols);
    let radius = params.radius.unwrap_or(usize::MAX);
    let mut out = SoftLabels {
        data: vec![0.0; first_l.data.len()],
        ..first_l.clone()
    };
    let classes = out.classes;
    let mut cands: Vec<(f64, &[f64])> = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            cands.clear();
            let q = current.cell(i, j);
            let (i0, i1) = (i.saturating_sub(radius), i.saturating_add(radius).min(rows - 1));
            let (j0, j1) = (j.saturating_sub(radius), j.saturating_add(radius).min(cols - 1));
            for (f, l) in queue.entries() {
                for a in i0..=i1 {
                    for b in j0..=j1 {
                        let sim = q.iter().zip(f.cell(a, b)).map(|(x, y)| x * y).sum::<f64>();
                        cands.push((sim, l.cell(a, b)));
                    }
                }
            }
            if cands.is_empty() {
                return Err(Error::Input("no propagation candidates".into()));
            }
            cands.sort_by(|x, y| y.0.total_cmp(&x.0));
            cands.truncate(params.k);
            let top = cands[0].0;
            let weights: Vec<f64> = cands.iter().map(|(s, _)| ((s - top) / params.tau).exp()).collect();
            let total: f64 = weights.iter().sum();
            let at = out.offset(i, j);
            let len = out.cell_len();
            let cell = &mut out.data[at..at + len];
            for (w, (_, src)) in weights.iter().zip(&cands) {
                for (o, s) in cell.iter_mut().zip(src.iter()) {
                    *o += w / total * s;
                }
            }
            for px in cell.chunks_exact_mut(classes) {
                let mass: f64 = px.iter().sum();
                if mass > 0.0 {
                    px.iter_mut().for_each(|v| *v /= mass);
                }
            }
        }
    }
    Ok(out)
}

/// Mean IoU over the classes present in `gt`.
pub fn miou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Input(format!(
            "{}x{} prediction for {}x{} ground truth",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let present: BTreeSet<u16> = gt.data.iter().copied().collect();
    let mut sum = 0.0;
    for &c in &present {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            inter += usize::from(p == c && g == c);
            union += usize::from(p == c || g == c);
        }
        sum += inter as f64 / union as f64;
    }
    Ok(sum / present.len() as f64)
}

/// Features and ground-truth labels of every frame of an episode.
#[derive(Debug, Clone)]
pub struct EpisodeFeatures {
    pub index: u64,
    pub classes: usize,
    pub features: Vec<FeatureGrid>,
    pub labels: Vec<LabelMap>,
}

/// Final-layer spatial tokens of `frame` on the patch grid.
pub fn dense_features<T: Scalar>(encoder: &Encoder, store: &ParamStore<T>, frame: &Image) -> Result<FeatureGrid> {
    let tokens = encode_frames(encoder, store, std::slice::from_ref(frame))?;
    let cfg = encoder.config();
    let g = cfg.grid();
    FeatureGrid::from_tokens(
        g,
        g,
        cfg.embed_dim,
        tokens.into_iter().next().expect("one frame").spatial,
    )
}

pub fn episode_features<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    episode: &Episode,
) -> Result<EpisodeFeatures> {
    let cfg = encoder.config();
    let g = cfg.grid();
    let mut frames = Vec::with_capacity(episode.frames());
    let mut labels = Vec::with_capacity(episode.frames());
    for t in 0..episode.frames() {
        let r = episode.render(t)?;
        frames.push(r.image);
        labels.push(r.labels);
    }
    let features = encode_frames(encoder, store, &frames)?
        .into_iter()
        .map(|tok| FeatureGrid::from_tokens(g, g, cfg.embed_dim, tok.spatial))
        .collect::<Result<_>>()?;
    Ok(EpisodeFeatures {
        index: episode.index,
        classes: episode.sprites.len() + 1,
        features,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    /// mIoU of frames `1..T` (frame 0 is the given source).
    pub frame_miou: Vec<f64>,
    pub miou: f64,
    pub predictions: Vec<LabelMap>,
}

/// Propagates the frame-0 labels through precomputed episode features.
pub fn propagate_episode(ep: &EpisodeFeatures, params: &PropagationParams) -> Result<PropagationResult> {
    if ep.features.len() < 2 {
        return Err(Error::Input("propagation needs at least two frames".into()));
    }
    let sub = ep.labels[0].height / ep.features[0].rows;
    let source = SoftLabels::from_labels(&ep.labels[0], sub, ep.classes)?;
    let mut queue = ContextQueue::new(ep.features[0].clone(), source, params.m)?;
    let mut frame_miou = Vec::with_capacity(ep.features.len() - 1);
    let mut predictions = Vec::with_capacity(ep.features.len() - 1);
    for (f, gt) in ep.features.iter().zip(&ep.labels).skip(1) {
        let soft = propagate(&queue, f, params)?;
        let hard = soft.to_hard();
        frame_miou.push(miou(&hard, gt)?);
        predictions.push(hard);
        queue.push(f.clone(), soft)?;
    }
    let mean = frame_miou.iter().sum::<f64>() / frame_miou.len() as f64;
    Ok(PropagationResult {
        frame_miou,
        miou: mean,
        predictions,
    })
}

pub fn run_propagation<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    episode: &Episode,
    params: &PropagationParams,
) -> Result<PropagationResult> {
    propagate_episode(&episode_features(encoder, store, episode)?, params)
}

/// Cartesian hyperparameter grid, iterated tau, k, m, radius (outer to
/// inner).
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationGrid {
    pub taus: Vec<f64>,
    pub ks: Vec<usize>,
    pub ms: Vec<usize>,
    pub radii: Vec<Option<usize>>,
}

impl Default for PropagationGrid {
    fn default() -> Self {
        PropagationGrid {
            taus: vec![0.07],
            ks: vec![1, 5],
            ms: vec![1, 4],
            radii: vec![Some(1), Some(3), None],
        }
    }
}

impl PropagationGrid {
    pub fn points(&self) -> Vec<PropagationParams> {
        let mut out = Vec::new();
        for &tau in &self.taus {
            for &k in &self.ks {
                for &m in &self.ms {
                    for &radius in &self.radii {
                        out.push(PropagationParams { k, radius, tau, m });
                    }
                }
            }
        }
        out
    }
}

pub const SWEEP_HEADER: &str = "episode,tau,k,m,radius,miou";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub episode: u64,
    pub params: PropagationParams,
    pub miou: f64,
}

/// One row per (episode, grid point), episodes outer.
pub fn sweep<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    episodes: &[Episode],
    grid: &PropagationGrid,
) -> Result<Vec<SweepRow>> {
    let points = grid.points();
    let mut rows = Vec::with_capacity(episodes.len() * points.len());
    for ep in episodes {
        let feats = episode_features(encoder, store, ep)?;
        for params in &points {
            rows.push(SweepRow {
                episode: ep.index,
                params: *params,
                miou: propagate_episode(&feats, params)?.miou,
            });
        }
    }
    Ok(rows)
}

/// Grid point with the highest mean mIoU over episodes; the earliest point
/// wins ties.
pub fn best_point(rows: &[SweepRow]) -> Option<(PropagationParams, f64)> {
    let mut points: Vec<(PropagationParams, f64, usize)> = Vec::new();
    for r in rows {
        match points.iter_mut().find(|(p, _, _)| *p == r.params) {
            Some(e) => {
                e.1 += r.miou;
                e.2 += 1;
            }
            None => points.push((r.params, r.miou, 1)),
        }
    }
    points
        .into_iter()
        .map(|(p, s, n)| (p, s / n as f64))
        .fold(None, |best, (p, m)| match best {
            Some((_, b)) if b >= m => best,
            _ => Some((p, m)),
        })
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER.split(','))?;
    for r in rows {
        let radius = r.params.radius.map_or("inf".to_string(), |v| v.to_string());
        w.write_record([
            r.episode.to_string(),
            r.params.tau.to_string(),
            r.params.k.to_string(),
            r.params.m.to_string(),
            radius,
            r.miou.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
