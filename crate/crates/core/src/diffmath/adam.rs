use serde::{Deserialize, Serialize};

use super::params::has_prefix;
use super::ParamVector;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment accumulators, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamVector) -> Self {
        Self {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over every group.
///
/// Coordinates whose gradient is exactly zero keep their value; their
/// moments still decay. This keeps untouched hash-table entries and frozen
/// groups bit-identical.
pub fn adam_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_step_groups(params, grads, state, cfg, |_| Some(1.0))
}

/// Adam restricted to groups for which `lr_scale(name)` is `Some`; the
/// scale multiplies `cfg.lr`. Groups mapped to `None` are untouched,
/// moments included.
pub fn adam_step_groups(
    params: &mut ParamVector,
    grads: &ParamVector,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr_scale: impl Fn(&str) -> Option<f64>,
) -> Result<()> {
    if !params.same_layout(grads) || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam_step", "parameters, gradients and state must share a layout"));
    }
    let selected: Vec<(std::ops::Range<usize>, f64)> = params
        .groups()
        .iter()
        .filter_map(|g| lr_scale(&g.name).map(|s| (g.range(), s)))
        .collect();
    for (r, _) in &selected {
        if grads.values()[r.clone()].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step gradient".into() });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let values = params.values_mut();
    for (range, scale) in selected {
        let lr = cfg.lr * scale;
        for i in range {
            let g = grads.values()[i];
            state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
            state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
            if g != 0.0 {
                let mhat = state.m[i] / bc1;
                let vhat = state.v[i] / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}

/// Convenience: lr scales keyed by group prefix, first match wins.
pub fn prefix_schedule<'a>(table: &'a [(&'a str, f64)]) -> impl Fn(&str) -> Option<f64> + 'a {
    move |name| {
        table
            .iter()
            .find(|(p, _)| has_prefix(name, p))
            .map(|&(_, s)| s)
    }
}
