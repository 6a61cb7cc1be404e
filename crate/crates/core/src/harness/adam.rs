use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::networks::NamedParam;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before any parameter changes.
pub fn adam_step<T: Real>(
    params: &mut [&mut NamedParam<T>],
    grads: &[Vec<T>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.numel() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.value.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        if let Some(i) = g.iter().position(|x| !x.as_f64().is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{} (element {i})", p.name)));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != grads.len() {
        return Err(Error::invalid("optimizer state does not match parameter list"));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let gi = g[i].as_f64();
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let update = cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            *w = T::of(w.as_f64() - update);
        }
    }
    Ok(())
}
