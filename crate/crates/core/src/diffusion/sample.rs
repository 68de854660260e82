//! Ancestral reverse diffusion with classifier-free guidance.

use super::concept::Condition;
use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use crate::diffmath::{SeedRng, Tensor};
use crate::{Error, Result};

/// `w * cond + (1 - w) * uncond`, elementwise.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], w: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| w * c + (1.0 - w) * u).collect()
}

/// Evenly spaced timesteps from `T` down to 1 (deduplicated).
pub fn respaced_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            if steps == 1 {
                total
            } else {
                let f = i as f64 / (steps - 1) as f64;
                (total as f64 - f * (total - 1) as f64).round() as usize
            }
        })
        .collect();
    ts.dedup();
    ts
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub guidance: f64,
    pub steps: usize,
    /// Clamp the predicted clean image to `[-1, 1]` (pixel space only).
    pub clip: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            guidance: 3.0,
            steps: 50,
            clip: true,
        }
    }
}

/// Guided noise prediction for a batch: `z` is `[n, C, S, S]`.
pub fn guided_eps(model: &Denoiser, z: &Tensor, t: usize, conds: &[&Condition], w: f64) -> Result<Tensor> {
    let n = conds.len();
    let ts = vec![t; n];
    let cond: Vec<&[f64]> = conds.iter().map(|c| c.embedding.as_slice()).collect();
    if w == 1.0 {
        return model.predict(z, &ts, &cond);
    }
    let null = vec![0.0; model.config.cond_dim];
    let uncond: Vec<&[f64]> = vec![null.as_slice(); n];
    let eu = model.predict(z, &ts, &uncond)?;
    if w == 0.0 {
        return Ok(eu);
    }
    let ec = model.predict(z, &ts, &cond)?;
    Tensor::new(z.shape().to_vec(), cfg_combine(ec.data(), eu.data(), w))
}

/// Draw one sample per condition; returns `[n, C, S, S]` in model space.
pub fn cfg_sample_batch(
    model: &Denoiser,
    conds: &[&Condition],
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
    rng: &mut SeedRng,
) -> Result<Tensor> {
    if !(opts.guidance >= 0.0) {
        return Err(Error::invalid(format!("guidance weight must be >= 0, got {}", opts.guidance)));
    }
    if conds.is_empty() {
        return Err(Error::invalid("no conditions to sample"));
    }
    let c = &model.config;
    let n = conds.len();
    let shape = vec![n, c.channels, c.size, c.size];
    let mut z = Tensor::new(shape.clone(), rng.normal_vec(n * c.element_count()))?;
    let ts = respaced_timesteps(schedule.steps(), opts.steps);
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = guided_eps(model, &z, t, conds, opts.guidance)?;
        let (ab, abp) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let (a, b) = (schedule.alpha(t), schedule.beta(t));
        let x0: Vec<f64> = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(zv, e)| {
                let x = (zv - b * e) / a;
                if opts.clip { x.clamp(-1.0, 1.0) } else { x }
            })
            .collect();
        if prev == 0 {
            z = Tensor::new(shape.clone(), x0)?;
            break;
        }
        let beta_step = 1.0 - ab / abp;
        let c0 = abp.sqrt() * beta_step / (1.0 - ab);
        let ct = (1.0 - beta_step).sqrt() * (1.0 - abp) / (1.0 - ab);
        let sigma = (beta_step * (1.0 - abp) / (1.0 - ab)).max(0.0).sqrt();
        let noise = rng.normal_vec(z.len());
        let next = x0
            .iter()
            .zip(z.data())
            .zip(&noise)
            .map(|((x, zv), e)| c0 * x + ct * zv + sigma * e)
            .collect();
        z = Tensor::new(shape.clone(), next)?;
    }
    if !z.is_finite() {
        return Err(Error::NonFinite { op: "cfg_sample".into() });
    }
    Ok(z)
}

/// One guided sample `[C, S, S]` for condition `s`.
pub fn cfg_sample(
    model: &Denoiser,
    s: &Condition,
    w: f64,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut SeedRng,
) -> Result<Tensor> {
    let opts = SampleOptions {
        guidance: w,
        steps,
        clip: true,
    };
    let c = &model.config;
    cfg_sample_batch(model, &[s], schedule, &opts, rng)?.reshape(vec![c.channels, c.size, c.size])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, DenoiserConfig, ScheduleKind};
    use proptest::prelude::*;

    #[test]
    fn respacing_covers_both_ends() {
        assert_eq!(respaced_timesteps(1000, 5), vec![1000, 750, 501, 251, 1]);
        assert_eq!(respaced_timesteps(10, 50).len(), 10);
        assert_eq!(respaced_timesteps(10, 1), vec![10]);
    }

    proptest! {
        #[test]
        fn guidance_endpoints_are_exact(c in prop::collection::vec(-5.0f64..5.0, 8), u in prop::collection::vec(-5.0f64..5.0, 8)) {
            prop_assert_eq!(cfg_combine(&c, &u, 1.0), c.clone());
            prop_assert_eq!(cfg_combine(&c, &u, 0.0), u.clone());
        }
    }

    #[test]
    fn sampling_is_deterministic_and_finite() {
        let cfg = DenoiserConfig {
            size: 8,
            width: 4,
            cond_dim: 4,
            time_dim: 4,
            cond_hidden: 8,
            ..DenoiserConfig::default()
        };
        let mut m = Denoiser::new(cfg, &mut SeedRng::new(1)).unwrap();
        let mut r = SeedRng::new(9);
        for v in m.params.group_mut("denoiser.out.weight").unwrap() {
            *v = 0.05 * r.normal();
        }
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let cond = Condition {
            embedding: vec![0.5; 4],
            tag: crate::diffusion::ConditionTag::Null,
        };
        let a = cfg_sample(&m, &cond, 3.0, &s, 10, &mut SeedRng::new(3)).unwrap();
        let b = cfg_sample(&m, &cond, 3.0, &s, 10, &mut SeedRng::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 8, 8]);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert!(cfg_sample(&m, &cond, -1.0, &s, 10, &mut SeedRng::new(3)).is_err());
    }

    #[test]
    fn zero_model_recovers_clean_estimate_of_zero() {
        // eps_hat = 0 means x0_hat = z / alpha; the chain still terminates
        // at a finite clipped image.
        let cfg = DenoiserConfig {
            size: 4,
            width: 2,
            cond_dim: 2,
            time_dim: 2,
            cond_hidden: 2,
            ..DenoiserConfig::default()
        };
        let m = Denoiser::new(cfg, &mut SeedRng::new(1)).unwrap();
        let s = make_schedule(50, ScheduleKind::Linear).unwrap();
        let out = cfg_sample(&m, &Condition::null(2), 0.0, &s, 50, &mut SeedRng::new(2)).unwrap();
        assert!(out.is_finite());
    }
}
