use serde::{Deserialize, Serialize};

use super::params::{Grads, ParameterStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one array per tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub(crate) fn check_shapes(&self, store: &ParameterStore) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .tensors()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(t, (m, v))| m.len() == t.data.len() && v.len() == t.data.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("optimizer state does not match parameters".into()))
        }
    }
}

/// One bias-corrected Adam update of every trainable tensor.
///
/// A non-finite gradient aborts the step before anything is modified.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    state.check_shapes(store)?;
    if grads.0.len() != store.len() {
        return Err(Error::Shape("gradient count".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, g) in grads.0.iter().enumerate() {
        let id = super::ParamId(k);
        if !store.get(id).trainable {
            continue;
        }
        let p = &mut store.get_mut(id).data;
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Inverse-square-root schedule with linear warmup:
/// `eta_max * min(epoch^-1/2, epoch / n_warmup^3/2)`, epochs counted from 1.
pub fn lr_schedule(epoch: usize, eta_max: f64, n_warmup: usize) -> Result<f64> {
    if epoch == 0 {
        return Err(Error::InvalidInput("epochs are counted from 1".into()));
    }
    if n_warmup == 0 {
        return Err(Error::InvalidInput("n_warmup must be positive".into()));
    }
    let e = epoch as f64;
    let decay = 1.0 / e.sqrt();
    let warm = e / (n_warmup as f64).powf(1.5);
    Ok(eta_max * decay.min(warm))
}
