use super::{Graph, ParamStore, Result, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is (near) zero are judged by absolute error.
    pub floor: f64,
    /// Check at most this many entries per tensor (evenly strided).
    pub max_entries: Option<usize>,
    /// Test hook: add this offset to the first analytic gradient entry of
    /// the named tensor before comparing.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: None,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.params.is_empty() && self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Compares analytic gradients of `loss_fn` against central finite
/// differences for every trainable tensor in `store`. Frozen tensors are
/// left out of the report. `loss_fn` must be deterministic.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    fn eval<F>(loss_fn: &mut F, store: &ParamStore<f64>) -> Result<f64>
    where
        F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        let v = g.scalar_value(loss);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    }

    store.zero_grad();
    {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        g.backward(loss, store)?;
    }

    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.name(id).to_string();
        let n = store.get(id).len();
        let mut analytic = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        if let Some((target, offset)) = &cfg.corrupt {
            if *target == name {
                analytic[0] += offset;
            }
        }
        let stride = cfg.max_entries.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut max_err: f64 = 0.0;
        let mut sum_err = 0.0;
        let mut count = 0;
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + cfg.step;
            let plus = eval(&mut loss_fn, store);
            store.get_mut(id).data_mut()[j] = orig - cfg.step;
            let minus = eval(&mut loss_fn, store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let err = relative_error(analytic[j], numeric, cfg.floor);
            max_err = max_err.max(err);
            sum_err += err;
            count += 1;
        }
        params.push(ParamCheck {
            name,
            entries: count,
            max_rel_error: max_err,
            mean_rel_error: sum_err / count.max(1) as f64,
        });
    }
    store.zero_grad();
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params,
    })
}
