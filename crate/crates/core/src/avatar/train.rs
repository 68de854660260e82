//! Photometric reconstruction of a [`DynamicAvatar`] from multi-view video.

use serde::{Deserialize, Serialize};

use super::model::{DynamicAvatar, APPEARANCE_GRID, APPEARANCE_MLP, DEFORMATION, EMBEDDINGS};
use crate::diffmath::params::has_prefix;
use crate::diffmath::{adam_step_groups, AdamConfig, AdamState, Graph, SeedRng, Tensor};
use crate::scenegen::MultiViewVideoDataset;
use crate::volren::{entropy_mean, generate_rays};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvatarTrainConfig {
    pub steps: usize,
    pub rays_per_step: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (exponential decay).
    pub lr_final_ratio: f64,
    pub grid_lr_scale: f64,
    pub deform_lr_scale: f64,
    pub embed_lr_scale: f64,
    pub lambda_entropy: f64,
    /// Pulls `D(p, e_0)` towards zero so frame 0 defines the canonical space.
    pub lambda_anchor: f64,
    pub train_deformation: bool,
    pub train_appearance: bool,
    pub train_embeddings: bool,
    pub log_every: usize,
}

impl Default for AvatarTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            rays_per_step: 256,
            lr: 5e-3,
            lr_final_ratio: 0.1,
            grid_lr_scale: 2.0,
            deform_lr_scale: 0.2,
            embed_lr_scale: 1.0,
            lambda_entropy: 1e-3,
            lambda_anchor: 1.0,
            train_deformation: true,
            train_appearance: true,
            train_embeddings: true,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, photometric loss)` every `log_every` steps.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub clamped_points: usize,
}

impl AvatarTrainConfig {
    fn lr_scale(&self, name: &str) -> Option<f64> {
        if has_prefix(name, DEFORMATION) {
            self.train_deformation.then_some(self.deform_lr_scale)
        } else if has_prefix(name, APPEARANCE_GRID) {
            self.train_appearance.then_some(self.grid_lr_scale)
        } else if has_prefix(name, APPEARANCE_MLP) {
            self.train_appearance.then_some(1.0)
        } else if has_prefix(name, EMBEDDINGS) {
            self.train_embeddings.then_some(self.embed_lr_scale)
        } else {
            None
        }
    }
}

/// Optimise `avatar` in place. On divergence the avatar keeps the last
/// finite parameters and an error is returned.
pub fn train_avatar(
    avatar: &mut DynamicAvatar,
    dataset: &MultiViewVideoDataset,
    cfg: &AvatarTrainConfig,
    rng: &mut SeedRng,
) -> Result<TrainReport> {
    dataset.validate()?;
    let cams = dataset.training_cameras();
    let frames = dataset.frames();
    if frames != avatar.frames {
        return Err(Error::invalid(format!(
            "avatar has {} frame codes, dataset has {frames} frames",
            avatar.frames
        )));
    }
    let (w, h) = dataset.size();
    let mut state = AdamState::new(&avatar.params);
    let mut report = TrainReport::default();
    let decay = cfg.lr_final_ratio.max(1e-12).ln() / cfg.steps.max(1) as f64;
    for step in 0..cfg.steps {
        // Random (camera, frame, pixel) triples.
        let mut rays = Vec::with_capacity(cfg.rays_per_step);
        let mut rframes = Vec::with_capacity(cfg.rays_per_step);
        let mut target = Vec::with_capacity(cfg.rays_per_step * 3);
        for _ in 0..cfg.rays_per_step {
            let c = cams[rng.below(cams.len())];
            let f = rng.below(frames);
            let (u, v) = (rng.below(w), rng.below(h));
            let cam = &dataset.cameras.cameras[c].camera;
            rays.extend(generate_rays(cam, &[(u, v)], &avatar.config.bounds)?);
            rframes.push(f);
            target.extend(dataset.images[c][f].pixel(u, v));
        }
        let mut g = Graph::new();
        let b = g.bind(&avatar.params, |n| cfg.lr_scale(n).is_some())?;
        let out = avatar.render_rays(&mut g, &b, &rays, &rframes, Some(rng))?;
        report.clamped_points += out.points.clamped;
        let rgb = g.slice(out.rgba, 0, 3)?;
        let tv = g.constant(Tensor::new(vec![rays.len(), 3], target)?)?;
        let photo = g.mse(rgb, tv)?;
        let mut loss = photo;
        if cfg.lambda_entropy > 0.0 {
            let omega = g.slice(out.rgba, 3, 1)?;
            let ent = entropy_mean(&mut g, omega)?;
            let ent = g.scale(ent, cfg.lambda_entropy)?;
            loss = g.add(loss, ent)?;
        }
        if cfg.lambda_anchor > 0.0 {
            let n = avatar.config.samples_per_ray;
            let mask: Vec<f64> = rframes
                .iter()
                .flat_map(|&f| std::iter::repeat(if f == 0 { 1.0 } else { 0.0 }).take(n * 3))
                .collect();
            let count = mask.iter().sum::<f64>() / 3.0;
            if count > 0.0 {
                let m = g.constant(Tensor::new(vec![rays.len() * n, 3], mask)?)?;
                let masked = g.mul(out.points.offset, m)?;
                let a = g.sum_squares(masked)?;
                let a = g.scale(a, cfg.lambda_anchor / count)?;
                loss = g.add(loss, a)?;
            }
        }
        let photo_value = g.value(photo).data()[0];
        let loss_value = g.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite reconstruction loss".into(),
            });
        }
        let grads = g.backward(loss).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        let grads = b.collect(&grads, &avatar.params);
        let lr = cfg.lr * (decay * step as f64).exp();
        adam_step_groups(&mut avatar.params, &grads, &mut state, &AdamConfig::with_lr(lr), |n| {
            cfg.lr_scale(n)
        })
        .map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::debug!("avatar step {step}: photometric {photo_value:.5}");
            report.losses.push((step, photo_value));
        }
        report.final_loss = photo_value;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::AvatarConfig;
    use crate::scenegen::{build_dataset, RigConfig, SceneConfig};
    use crate::volren::HashGridConfig;

    fn tiny_dataset() -> MultiViewVideoDataset {
        build_dataset(
            3,
            &SceneConfig {
                frames: 2,
                ..SceneConfig::default()
            },
            &RigConfig {
                cameras: 2,
                holdout_cameras: 0,
                width: 8,
                height: 8,
                ..RigConfig::default()
            },
        )
        .unwrap()
    }

    fn tiny_avatar(frames: usize) -> DynamicAvatar {
        let cfg = AvatarConfig {
            deform_width: 8,
            deform_depth: 1,
            appearance_width: 8,
            appearance_depth: 1,
            grid: HashGridConfig {
                levels: 2,
                log2_table_size: 8,
                features: 2,
                base_resolution: 4,
                max_resolution: 8,
            },
            samples_per_ray: 8,
            ..AvatarConfig::default()
        };
        DynamicAvatar::new(cfg, frames, &mut SeedRng::new(1)).unwrap()
    }

    #[test]
    fn frozen_deformation_is_bit_identical() {
        let ds = tiny_dataset();
        let mut a = tiny_avatar(2);
        let before = a.params.fingerprint(DEFORMATION);
        let grid_before = a.params.fingerprint(APPEARANCE_GRID);
        let cfg = AvatarTrainConfig {
            steps: 20,
            rays_per_step: 16,
            train_deformation: false,
            ..AvatarTrainConfig::default()
        };
        train_avatar(&mut a, &ds, &cfg, &mut SeedRng::new(2)).unwrap();
        assert_eq!(a.params.fingerprint(DEFORMATION), before);
        assert_ne!(a.params.fingerprint(APPEARANCE_GRID), grid_before);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = tiny_dataset();
        let cfg = AvatarTrainConfig {
            steps: 150,
            rays_per_step: 32,
            log_every: 10,
            ..AvatarTrainConfig::default()
        };
        let mut a = tiny_avatar(2);
        let mut b = tiny_avatar(2);
        let ra = train_avatar(&mut a, &ds, &cfg, &mut SeedRng::new(5)).unwrap();
        let rb = train_avatar(&mut b, &ds, &cfg, &mut SeedRng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let first = ra.losses.first().unwrap().1;
        assert!(ra.final_loss < 0.5 * first, "{first} -> {}", ra.final_loss);
    }

    #[test]
    fn frame_count_mismatch_rejected() {
        let ds = tiny_dataset();
        let mut a = tiny_avatar(3);
        assert!(train_avatar(&mut a, &ds, &AvatarTrainConfig::default(), &mut SeedRng::new(1)).is_err());
    }
}
