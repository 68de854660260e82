//! Mixed base/fine-tuned noise prediction and the score-distillation gradient.

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::diffusion::{add_noise, Condition, Denoiser, NoiseSchedule};
use crate::{Error, Result};

/// SDS weighting `w(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `beta_t^2`.
    BetaSquared,
    Constant,
}

/// How the render is noised before guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noising {
    /// `alpha_t x + beta_t eps`, the training forward process.
    Scaled,
    /// `x + beta_t eps`.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Overall guidance weight `w`.
    pub w: f64,
    /// Base-model weight `v` for `t > k`.
    pub v_hi: f64,
    pub k: usize,
    pub t_min: usize,
    pub tmax_start: usize,
    pub tmax_end: usize,
    /// Off: `t_max` stays at `tmax_start` for the whole run.
    pub anneal: bool,
    pub weighting: Weighting,
    pub noising: Noising,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 10.0,
            v_hi: 0.6,
            k: 600,
            t_min: 20,
            tmax_start: 980,
            tmax_end: 400,
            anneal: true,
            weighting: Weighting::BetaSquared,
            noising: Noising::Scaled,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.v_hi) {
            return bad(format!("v_hi = {} outside [0, 1]", self.v_hi));
        }
        if !(self.w.is_finite() && self.w >= 0.0) {
            return bad(format!("guidance weight {} must be finite and >= 0", self.w));
        }
        // k = 0 is allowed: it routes every timestep through `v_hi`.
        if self.k > total_steps {
            return bad(format!("gate k = {} outside [0, {total_steps}]", self.k));
        }
        if !(1 <= self.t_min && self.t_min <= self.tmax_end && self.tmax_end <= self.tmax_start && self.tmax_start <= total_steps) {
            return bad(format!(
                "need 1 <= t_min ({}) <= tmax_end ({}) <= tmax_start ({}) <= T ({total_steps})",
                self.t_min, self.tmax_end, self.tmax_start
            ));
        }
        Ok(())
    }
}

/// `v_hi` above the gate, 1 at or below it.
pub fn v_schedule(t: usize, cfg: &GuidanceConfig) -> f64 {
    if t > cfg.k {
        cfg.v_hi
    } else {
        1.0
    }
}

/// Linear descent of the largest sampled timestep over `n` iterations.
pub fn anneal_tmax(i: usize, n: usize, cfg: &GuidanceConfig) -> usize {
    if !cfg.anneal || n <= 1 {
        return cfg.tmax_start;
    }
    let f = i.min(n - 1) as f64 / (n - 1) as f64;
    let (a, b) = (cfg.tmax_start as f64, cfg.tmax_end as f64);
    ((a + f * (b - a)).round() as usize).max(1)
}

/// `w (v c + (1 - v) f) + (1 - w) u`, elementwise.
pub fn psi_combine(base_cond: &[f64], finetuned: &[f64], base_uncond: &[f64], w: f64, v: f64) -> Vec<f64> {
    base_cond
        .iter()
        .zip(finetuned)
        .zip(base_uncond)
        .map(|((c, f), u)| w * (v * c + (1.0 - v) * f) + (1.0 - w) * u)
        .collect()
}

/// Noised render handed to both denoisers; the single place `x_t` is formed.
pub fn noise_render(x: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule, kind: Noising) -> Result<Tensor> {
    match kind {
        Noising::Scaled => add_noise(x, t, eps, schedule),
        Noising::Additive => {
            let scaled = add_noise(&Tensor::zeros(x.shape().to_vec()), t, eps, schedule)?;
            Tensor::new(x.shape().to_vec(), x.data().iter().zip(scaled.data()).map(|(a, b)| a + b).collect())
        }
    }
}

/// Mixed prediction for a single `[1, C, S, S]` input. Branches with zero
/// weight are not evaluated.
#[allow(clippy::too_many_arguments)]
pub fn guided_noise(
    base: &Denoiser,
    finetuned: &Denoiser,
    x_t: &Tensor,
    t: usize,
    s: &Condition,
    s_i: &Condition,
    w: f64,
    v: f64,
) -> Result<Tensor> {
    if base.config != finetuned.config {
        return Err(Error::Config("base and fine-tuned denoisers differ in architecture".into()));
    }
    let zeros = || Tensor::zeros(x_t.shape().to_vec());
    let ts = [t];
    let c = if w != 0.0 && v != 0.0 {
        base.predict(x_t, &ts, &[&s.embedding])?
    } else {
        zeros()
    };
    let f = if w != 0.0 && v != 1.0 {
        finetuned.predict(x_t, &ts, &[&s_i.embedding])?
    } else {
        zeros()
    };
    let u = if w != 1.0 {
        let null = vec![0.0; base.config.cond_dim];
        base.predict(x_t, &ts, &[&null])?
    } else {
        zeros()
    };
    Tensor::new(x_t.shape().to_vec(), psi_combine(c.data(), f.data(), u.data(), w, v))
}

/// `w(t) (eps - psi)`.
pub fn sds_grad(eps: &Tensor, psi: &Tensor, t: usize, schedule: &NoiseSchedule, weighting: Weighting) -> Result<Tensor> {
    if eps.shape() != psi.shape() {
        return Err(Error::shape("sds_grad", format!("{:?} vs {:?}", eps.shape(), psi.shape())));
    }
    let wt = match weighting {
        Weighting::BetaSquared => schedule.weight(t),
        Weighting::Constant => 1.0,
    };
    Tensor::new(eps.shape().to_vec(), eps.data().iter().zip(psi.data()).map(|(e, p)| wt * (e - p)).collect())
}
