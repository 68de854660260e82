//! Rendering of the evaluation views and the metrics computed from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::avatar::DynamicAvatar;
use crate::metrics::{
    identity_drift, laplacian_energy, mean_channel_dominance, psnr_set, sample_bilinear, temporal_consistency,
};
use crate::pipeline::stages::{files, load_avatar, load_cameras, load_dataset, load_edited, require, save_view, view_paths};
use crate::pipeline::{PipelineConfig, Stage, StageDir};
use crate::scenegen::{trace, SyntheticScene};
use crate::volren::{vec3, Camera, CameraFile, Image};
use crate::{Error, Result};

pub const ORIGINAL: &str = "original";
pub const EDITED: &str = "edited";

/// `(camera, frame)` pairs rendered for evaluation: every camera at frames
/// `0, stride, 2 stride, ...` plus the frontal camera at every frame.
pub fn eval_views(cameras: &CameraFile, frames: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    let frontal = cameras
        .cameras
        .iter()
        .position(|c| c.frontal)
        .ok_or_else(|| Error::invalid("camera file has no frontal camera"))?;
    let mut views: Vec<(usize, usize)> = (0..cameras.cameras.len())
        .flat_map(|c| (0..frames).step_by(stride.max(1)).map(move |f| (c, f)))
        .chain((0..frames).map(|f| (frontal, f)))
        .collect();
    views.sort_unstable();
    views.dedup();
    Ok(views)
}

pub fn render_views(avatar: &DynamicAvatar, cameras: &CameraFile, views: &[(usize, usize)]) -> Result<Vec<Image>> {
    views
        .iter()
        .map(|&(c, f)| avatar.render_frame(&cameras.cameras[c].camera, f, None))
        .collect()
}

pub(crate) fn frame_count(cfg: &PipelineConfig) -> usize {
    cfg.scenegen.scene.frames
}

pub(crate) fn render_stage(cfg: &PipelineConfig) -> Result<()> {
    let cameras = load_cameras(cfg)?;
    let edited = load_edited(cfg)?;
    let original = load_avatar(cfg)?;
    let mut st = StageDir::for_stage(cfg, Stage::Render)?;
    let views = eval_views(&cameras, frame_count(cfg), cfg.eval.frame_stride)?;
    for (name, avatar) in [(ORIGINAL, &original), (EDITED, &edited)] {
        let root = st.path(name);
        for (&(c, f), img) in views.iter().zip(render_views(avatar, &cameras, &views)?) {
            save_view(&root, &cameras.cameras[c].name, f, &img)?;
        }
    }
    st.note(format!("rendered {} views of the original and edited avatars", views.len()));
    st.finish()
}

/// `+1` for a prompt that should push channel dominance up, `-1` for down.
pub fn prompt_sign(prompt: &str) -> f64 {
    if prompt == "warm" {
        -1.0
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Original avatar against ground truth on held-out cameras.
    pub psnr_holdout: f64,
    pub psnr_train: f64,
    /// Mean per-pixel difference between pre- and post-edit renders.
    pub identity_drift: f64,
    pub dominance_before: f64,
    pub dominance_after: f64,
    /// Dominance change signed towards the prompt (positive: moved as asked).
    pub class_shift: f64,
    /// Dominance changed sign towards the prompt.
    pub dominance_flipped: bool,
    /// Mean per-pixel difference of consecutive frontal frames.
    pub temporal_consistency: f64,
    pub temporal_consistency_original: f64,
    /// Mean absolute deviation of colour across frames at ground-truth
    /// corresponding surface points (frontal camera).
    pub correspondence_mad: f64,
    pub correspondence_mad_original: f64,
    /// Same, for the per-point edit delta `edited - original`.
    pub correspondence_mad_delta: f64,
    pub correspondence_points: usize,
    pub laplacian_energy: f64,
    pub laplacian_energy_original: f64,
}

/// Per-frame colours of surface points that stay visible to `camera`,
/// sampled from `frames`.
pub struct Tracks {
    /// `tracks[p]` lists `(frame, u, v)` for point `p`.
    pub tracks: Vec<Vec<(usize, f64, f64)>>,
}

/// Follow the surface points seen at frame 0 through every frame using the
/// scene's exact deformation. A sample is kept when the point is the first
/// hit along its pixel ray and all four bilinear taps land on the head.
pub fn correspondence_tracks(scene: &SyntheticScene, camera: &Camera, frames: usize) -> Result<Tracks> {
    let origin = camera.center();
    let tol = 1e-2 * scene.bounding_radius();
    let on_head = |f: usize, u: f64, v: f64| trace(scene, f, origin, camera.direction(u, v)).is_some();
    let mut tracks = Vec::new();
    for y in 0..camera.height {
        for x in 0..camera.width {
            let Some(h0) = trace(scene, 0, origin, camera.direction(x as f64, y as f64)) else {
                continue;
            };
            let mut track = Vec::new();
            for f in 0..frames {
                let w = scene.to_world(f, h0.canonical)?;
                let Some((u, v, _)) = camera.project(w) else { continue };
                if u < 0.0 || v < 0.0 || u > (camera.width - 1) as f64 || v > (camera.height - 1) as f64 {
                    continue;
                }
                let Some(h) = trace(scene, f, origin, camera.direction(u, v)) else {
                    continue;
                };
                if (h.t - vec3::norm(vec3::sub(w, origin))).abs() > tol {
                    continue;
                }
                let (x0, y0) = (u.floor(), v.floor());
                let taps = [(x0, y0), (x0 + 1.0, y0), (x0, y0 + 1.0), (x0 + 1.0, y0 + 1.0)];
                if taps.iter().all(|&(a, b)| on_head(f, a.min((camera.width - 1) as f64), b.min((camera.height - 1) as f64))) {
                    track.push((f, u, v));
                }
            }
            if track.len() >= 2 {
                tracks.push(track);
            }
        }
    }
    Ok(Tracks { tracks })
}

impl Tracks {
    /// Mean over points of the mean absolute deviation (over frames and
    /// channels) of `colour(frame, u, v)` from its per-point mean.
    pub fn mad(&self, colour: impl Fn(usize, f64, f64) -> [f64; 3]) -> f64 {
        if self.tracks.is_empty() {
            return f64::NAN;
        }
        let mut total = 0.0;
        for t in &self.tracks {
            let cs: Vec<[f64; 3]> = t.iter().map(|&(f, u, v)| colour(f, u, v)).collect();
            let n = cs.len() as f64;
            let mut mean = [0.0; 3];
            for c in &cs {
                for k in 0..3 {
                    mean[k] += c[k] / n;
                }
            }
            let dev: f64 = cs.iter().flat_map(|c| (0..3).map(move |k| (c[k] - mean[k]).abs())).sum();
            total += dev / (3.0 * n);
        }
        total / self.tracks.len() as f64
    }
}

fn load_view_set(root: &Path, cameras: &CameraFile, views: &[(usize, usize)]) -> Result<Vec<Image>> {
    views
        .iter()
        .map(|&(c, f)| {
            let (_, raw) = view_paths(root, &cameras.cameras[c].name, f);
            if !raw.exists() {
                return Err(Error::MissingDependency {
                    stage: Stage::Render.name().into(),
                    artifact: raw.display().to_string(),
                });
            }
            Image::load_float(&raw)
        })
        .collect()
}

pub(crate) fn eval_stage(cfg: &PipelineConfig) -> Result<()> {
    require(cfg, Stage::Render, ORIGINAL)?;
    let render_root = cfg.out.join(Stage::Render.dir());
    let ds = load_dataset(cfg)?;
    let cameras = &ds.cameras;
    let views = eval_views(cameras, ds.frames(), cfg.eval.frame_stride)?;
    let before = load_view_set(&render_root.join(ORIGINAL), cameras, &views)?;
    let after = load_view_set(&render_root.join(EDITED), cameras, &views)?;
    let mut st = StageDir::for_stage(cfg, Stage::Eval)?;
    let m = compute_metrics(&ds, &views, &before, &after, &cfg.vtsds.prompt)?;
    st.write(files::METRICS, serde_json::to_string_pretty(&m).expect("metrics serialize"))?;
    st.note(format!(
        "psnr holdout {:.2} dB, drift {:.4}, class shift {:+.4}, temporal {:.4}, correspondence MAD {:.4}",
        m.psnr_holdout, m.identity_drift, m.class_shift, m.temporal_consistency, m.correspondence_mad
    ));
    st.finish()
}

pub fn compute_metrics(
    ds: &crate::scenegen::MultiViewVideoDataset,
    views: &[(usize, usize)],
    before: &[Image],
    after: &[Image],
    prompt: &str,
) -> Result<EvalMetrics> {
    let frontal = ds.frontal_camera()?;
    let holdout = ds.holdout_cameras();
    let pairs = |cams: &[usize]| -> Vec<(&Image, &Image)> {
        views
            .iter()
            .zip(before)
            .filter(|((c, _), _)| cams.contains(c))
            .map(|(&(c, f), img)| (img, &ds.images[c][f]))
            .collect()
    };
    let psnr_or_nan = |p: Vec<(&Image, &Image)>| if p.is_empty() { Ok(f64::NAN) } else { psnr_set(&p) };
    let psnr_holdout = psnr_or_nan(pairs(&holdout))?;
    let psnr_train = psnr_or_nan(pairs(&ds.training_cameras()))?;
    let sequence = |set: &[Image]| -> Vec<Image> {
        views
            .iter()
            .zip(set)
            .filter(|((c, _), _)| *c == frontal)
            .map(|(_, img)| img.clone())
            .collect()
    };
    let (seq_before, seq_after) = (sequence(before), sequence(after));
    let scene = ds
        .scene
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset carries no scene; correspondence metric needs ground truth"))?;
    let tracks = correspondence_tracks(scene, &ds.cameras.cameras[frontal].camera, seq_before.len())?;
    let at = |seq: &[Image], f: usize, u: f64, v: f64| sample_bilinear(&seq[f], u, v);
    let d_before = mean_channel_dominance(before);
    let d_after = mean_channel_dominance(after);
    let sign = prompt_sign(prompt);
    let mean_lap = |set: &[Image]| set.iter().map(laplacian_energy).sum::<f64>() / set.len().max(1) as f64;
    Ok(EvalMetrics {
        psnr_holdout,
        psnr_train,
        identity_drift: identity_drift(before, after)?,
        dominance_before: d_before,
        dominance_after: d_after,
        class_shift: sign * (d_after - d_before),
        dominance_flipped: sign * d_before < 0.0 && sign * d_after > 0.0,
        temporal_consistency: temporal_consistency(&seq_after)?,
        temporal_consistency_original: temporal_consistency(&seq_before)?,
        correspondence_mad: tracks.mad(|f, u, v| at(&seq_after, f, u, v)),
        correspondence_mad_original: tracks.mad(|f, u, v| at(&seq_before, f, u, v)),
        correspondence_mad_delta: tracks.mad(|f, u, v| {
            let (a, b) = (at(&seq_after, f, u, v), at(&seq_before, f, u, v));
            [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
        }),
        correspondence_points: tracks.tracks.len(),
        laplacian_energy: mean_lap(after),
        laplacian_energy_original: mean_lap(before),
    })
}

pub fn load_metrics(cfg: &PipelineConfig) -> Result<EvalMetrics> {
    let p = require(cfg, Stage::Eval, files::METRICS)?;
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| crate::volren::camera_file::json_error("eval metrics", &e))
}
