use serde::{Deserialize, Serialize};

use super::{shape_err, ParamStore, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers and step counter, exported for checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

/// AdamW with bias-corrected moments and decoupled weight decay.
///
/// Decay is applied only to parameters registered with `decay = true`.
/// Parameters without a gradient are treated as having a zero gradient;
/// frozen parameters are skipped entirely.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = |_| store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        AdamW {
            config,
            step: 0,
            first: zeros(()),
            second: zeros(()),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(shape_err(
                "adamw_step",
                format!(
                    "optimizer tracks {} tensors, store has {}",
                    self.first.len(),
                    store.len()
                ),
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let decay = if store.decays(id) {
                T::from_f64(1.0 - lr * c.weight_decay)
            } else {
                T::one()
            };
            let tensor = store.get_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            if self.first[i].len() != tensor.len() {
                return Err(shape_err("adamw_step", "moment buffer does not match parameter"));
            }
            let grad = tensor.grad().map(<[T]>::to_vec);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + ob1 * g;
                v[j] = b2 * v[j] + ob2 * g * g;
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                data[j] = data[j] * decay - step_size * m[j] / denom;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> OptimizerSnapshot<T> {
        OptimizerSnapshot {
            step: self.step,
            first: self.first.clone(),
            second: self.second.clone(),
        }
    }

    pub fn restore(&mut self, snap: OptimizerSnapshot<T>) -> Result<()> {
        let fits = |bufs: &Vec<Vec<T>>| {
            bufs.len() == self.first.len() && bufs.iter().zip(&self.first).all(|(a, b)| a.len() == b.len())
        };
        if !fits(&snap.first) || !fits(&snap.second) {
            return Err(shape_err("adamw_restore", "snapshot does not match parameter layout"));
        }
        self.step = snap.step;
        self.first = snap.first;
        self.second = snap.second;
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Warmup over `warmup_fraction` of the run.
    pub fn new(base_lr: f64, total_steps: u64, warmup_fraction: f64) -> Self {
        LrSchedule {
            base_lr,
            warmup_steps: (total_steps as f64 * warmup_fraction).round() as u64,
            total_steps,
        }
    }

    /// Learning rate for zero-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
