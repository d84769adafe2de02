use std::io::Write;

use rand::seq::SliceRandom;

use super::encode_frames;
use crate::rng::{substream, Stream};
use crate::scene::Episode;
use crate::tensor::{AdamW, AdamWConfig, Graph, Init, LrSchedule, ParamId, ParamStore, Scalar};
use crate::vit::Encoder;
use crate::{Error, Result};

/// Sprite-1 state read out by the probe, in column order.
pub const PROBE_TARGETS: [&str; 6] = ["x", "y", "vx", "vy", "dx", "dy"];

pub const PROBE_HEADER: &str = "encoder,seed,mse,mean_r2,r2_x,r2_y,r2_vx,r2_vy,r2_dx,r2_dy";

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    /// Bottleneck tokens of frames `t - delta` and `t`, concatenated.
    pub input: Vec<f64>,
    /// Center, velocity and displacement over `delta`, scaled into [-1, 1].
    pub target: [f64; 6],
    pub episode: u64,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub train: Vec<ProbeSample>,
    pub test: Vec<ProbeSample>,
    pub delta: usize,
}

impl ProbeDataset {
    /// Appends each target to its own input. A probe that cannot fit this
    /// copy of the answer has an optimizer problem, not a feature problem.
    pub fn with_cheat_features(&self) -> ProbeDataset {
        let cheat = |s: &ProbeSample| ProbeSample {
            input: s.input.iter().chain(&s.target).copied().collect(),
            ..s.clone()
        };
        ProbeDataset {
            train: self.train.iter().map(cheat).collect(),
            test: self.test.iter().map(cheat).collect(),
            delta: self.delta,
        }
    }
}

/// Normalized state of the first sprite at frame `t`.
pub fn probe_targets(episode: &Episode, t: usize, delta: usize) -> Result<[f64; 6]> {
    let cfg = &episode.config;
    let sprite = episode
        .sprites
        .first()
        .ok_or_else(|| Error::Input("probe targets need at least one sprite".into()))?;
    if delta == 0 || t < delta || t >= episode.frames() {
        return Err(Error::Input(format!("frame {t} with delta {delta}")));
    }
    let half = cfg.size as f64 / 2.0;
    let vmax = if cfg.speed[1] > 0.0 { cfg.speed[1] } else { 1.0 };
    let [x, y] = sprite.centers[t];
    let [px, py] = sprite.centers[t - delta];
    let [vx, vy] = sprite.velocities[t];
    let span = delta as f64 * vmax;
    Ok([
        (x - half) / half,
        (y - half) / half,
        vx / vmax,
        vy / vmax,
        (x - px) / span,
        (y - py) / span,
    ])
}

/// Samples for every `t >= delta` of each episode. Episodes, not frames, are
/// split: a shuffle under `split_seed` sends the first
/// `ceil(test_fraction * len)` of them to the test side.
pub fn build_probe_dataset<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    episodes: &[Episode],
    delta: usize,
    split_seed: u64,
    test_fraction: f64,
) -> Result<ProbeDataset> {
    if !(0.0..1.0).contains(&test_fraction) || episodes.len() < 2 {
        return Err(Error::Input(
            "probe split needs two episodes and a test fraction in [0, 1)".into(),
        ));
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.shuffle(&mut substream(split_seed, Stream::Split, 0));
    let n_test = ((test_fraction * episodes.len() as f64).ceil() as usize).clamp(1, episodes.len() - 1);
    let mut is_test = vec![false; episodes.len()];
    order[..n_test].iter().for_each(|&i| is_test[i] = true);

    let mut ds = ProbeDataset {
        train: Vec::new(),
        test: Vec::new(),
        delta,
    };
    for (ep, test) in episodes.iter().zip(is_test) {
        if delta == 0 || delta >= ep.frames() {
            return Err(Error::Input(format!("delta {delta} with {} frames", ep.frames())));
        }
        let frames = (0..ep.frames())
            .map(|t| ep.render(t).map(|r| r.image))
            .collect::<Result<Vec<_>>>()?;
        let tokens = encode_frames(encoder, store, &frames)?;
        for t in delta..ep.frames() {
            let (past, now) = (&tokens[t - delta].cls, &tokens[t].cls);
            let (Some(past), Some(now)) = (past, now) else {
                return Err(Error::Config(
                    "the probe reads the CLS token; the encoder has none".into(),
                ));
            };
            let sample = ProbeSample {
                input: past.iter().chain(now).copied().collect(),
                target: probe_targets(ep, t, delta)?,
                episode: ep.index,
                t,
            };
            if test {
                ds.test.push(sample);
            } else {
                ds.train.push(sample);
            }
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 128,
            epochs: 100,
            batch_size: 64,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Two affine layers with a GELU between, behind input standardization
/// frozen from the training split.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub store: ParamStore<f64>,
    layers: [(ParamId, ParamId); 2],
}

impl ProbeModel {
    fn new(input: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = substream(seed, Stream::Probe, 0);
        // The readout starts at zero, so an untrained probe predicts its bias.
        let mut layer = |name: &str, i: usize, o: usize, init: Init| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add_init(format!("{name}.weight"), &[i, o], init, true, &mut rng)?,
                store.add_init(format!("{name}.bias"), &[o], Init::Zeros, false, &mut rng)?,
            ))
        };
        let layers = [
            layer("fc1", input, hidden, Init::TruncNormal(1.0 / (input as f64).sqrt()))?,
            layer("fc2", hidden, PROBE_TARGETS.len(), Init::Zeros)?,
        ];
        Ok(ProbeModel {
            mean: vec![0.0; input],
            std: vec![1.0; input],
            store,
            layers,
        })
    }

    fn forward(&self, g: &mut Graph<f64>, inputs: &[&[f64]]) -> Result<crate::tensor::Var> {
        let width = self.mean.len();
        let mut data = Vec::with_capacity(inputs.len() * width);
        for x in inputs {
            if x.len() != width {
                return Err(Error::Input(format!(
                    "probe input of width {} (expected {width})",
                    x.len()
                )));
            }
            data.extend(x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s));
        }
        let mut h = g.input(vec![inputs.len(), width], data)?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(&self.store, w), g.param(&self.store, b));
            h = g.linear(h, w, Some(b))?;
            if i == 0 {
                h = g.gelu(h)?;
            }
        }
        Ok(h)
    }

    pub fn predict(&self, inputs: &[&[f64]]) -> Result<Vec<[f64; 6]>> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, inputs)?;
        Ok(g.value(y)
            .chunks_exact(6)
            .map(|c| c.try_into().expect("six outputs"))
            .collect())
    }
}

/// Fits a probe with AdamW on mean squared error. Shuffling and
/// initialization derive from `cfg.seed` alone.
pub fn train_probe(train: &[ProbeSample], cfg: &ProbeConfig) -> Result<ProbeModel> {
    let first = train
        .first()
        .ok_or_else(|| Error::Input("empty probe training split".into()))?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::Config(
            "probe epochs, batch size and width must be positive".into(),
        ));
    }
    let width = first.input.len();
    let mut model = ProbeModel::new(width, cfg.hidden, cfg.seed)?;
    let n = train.len() as f64;
    for j in 0..width {
        let mean = train.iter().map(|s| s.input[j]).sum::<f64>() / n;
        let var = train.iter().map(|s| (s.input[j] - mean).powi(2)).sum::<f64>() / n;
        model.mean[j] = mean;
        model.std[j] = var.sqrt().max(1e-6);
    }
    // Start the output at the target mean so training fits the variation.
    let mut bias = vec![0.0; PROBE_TARGETS.len()];
    for s in train {
        bias.iter_mut().zip(&s.target).for_each(|(b, t)| *b += t / n);
    }
    model.store.set_data(model.layers[1].1, bias)?;
    let mut optim = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
        &model.store,
    );
    let batches = train.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(cfg.lr, (cfg.epochs * batches) as u64, 0.0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, Stream::Probe, 1 + epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            let inputs: Vec<&[f64]> = idx.iter().map(|&i| train[i].input.as_slice()).collect();
            let target: Vec<f64> = idx.iter().flat_map(|&i| train[i].target).collect();
            let mut g = Graph::new();
            let y = model.forward(&mut g, &inputs)?;
            let loss = g.mse_loss(y, &target)?;
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            optim.step(&mut model.store, schedule.lr(step))?;
            step += 1;
        }
    }
    Ok(model)
}

/// `1 - SSE / SST` with SST from the spread of `target` itself; `None` when
/// the target has no variance.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Option<f64> {
    if pred.len() != target.len() || target.is_empty() {
        return None;
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let sst: f64 = target.iter().map(|y| (y - mean).powi(2)).sum();
    let scale: f64 = target.iter().map(|y| y * y).sum();
    if sst <= 1e-20 * scale {
        return None;
    }
    let sse: f64 = pred.iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum();
    Some(1.0 - sse / sst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeMetrics {
    pub mse: f64,
    /// Per target, `None` where the test split has zero variance.
    pub r2: Vec<Option<f64>>,
    /// Mean over the defined entries of `r2`.
    pub mean_r2: Option<f64>,
}

pub fn eval_probe(model: &ProbeModel, test: &[ProbeSample]) -> Result<ProbeMetrics> {
    if test.is_empty() {
        return Err(Error::Input("empty probe test split".into()));
    }
    let inputs: Vec<&[f64]> = test.iter().map(|s| s.input.as_slice()).collect();
    let pred = model.predict(&inputs)?;
    let mut sq = 0.0;
    for (p, s) in pred.iter().zip(test) {
        sq += p.iter().zip(&s.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let r2: Vec<Option<f64>> = (0..PROBE_TARGETS.len())
        .map(|j| {
            let p: Vec<f64> = pred.iter().map(|v| v[j]).collect();
            let y: Vec<f64> = test.iter().map(|s| s.target[j]).collect();
            r_squared(&p, &y)
        })
        .collect();
    let defined: Vec<f64> = r2.iter().flatten().copied().collect();
    Ok(ProbeMetrics {
        mse: sq / (test.len() * PROBE_TARGETS.len()) as f64,
        mean_r2: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        r2,
    })
}

/// Appends one report row per call; `encoder` names the checkpoint or
/// control being scored.
pub fn write_probe_row<W: Write>(out: W, header: bool, encoder: &str, seed: u64, m: &ProbeMetrics) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if header {
        w.write_record(PROBE_HEADER.split(','))?;
    }
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut row = vec![encoder.to_string(), seed.to_string(), m.mse.to_string(), fmt(m.mean_r2)];
    row.extend(m.r2.iter().map(|&v| fmt(v)));
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}
