//! The appearance-only editing loop.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::guidance::{anneal_tmax, guided_noise, noise_render, sds_grad, v_schedule, GuidanceConfig};
use crate::avatar::model::{DEFORMATION, EMBEDDINGS};
use crate::avatar::{is_appearance, DynamicAvatar};
use crate::diffmath::conv::upsample_bilinear2;
use crate::diffmath::{adam_step_groups, AdamConfig, AdamState, Graph, ParamBinding, ParamVector, SeedRng, Tensor, Var};
use crate::diffusion::{AutoencoderPair, Condition, ConceptBook, Denoiser, NoiseSchedule};
use crate::keyframes::KeyframeSet;
use crate::volren::{all_pixels, entropy_mean, generate_rays, Camera, CameraFile};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lambda_entropy: f64,
    /// Render side length; `None` is half the denoiser image size.
    pub render_size: Option<usize>,
    /// Invoke the checkpoint hook every this many iterations (0: never).
    pub checkpoint_every: usize,
    /// Abort once more than this fraction of iterations was skipped.
    pub max_skip_fraction: f64,
    pub guidance: GuidanceConfig,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr: 1e-3,
            lambda_entropy: 0.01,
            render_size: None,
            checkpoint_every: 0,
            max_skip_fraction: 0.01,
            guidance: GuidanceConfig::default(),
        }
    }
}

/// Everything the loop reads; only the avatar copy it returns is mutated.
pub struct EditTask<'a> {
    pub avatar: &'a DynamicAvatar,
    pub base: &'a Denoiser,
    pub finetuned: &'a Denoiser,
    pub autoencoder: &'a AutoencoderPair,
    pub schedule: &'a NoiseSchedule,
    pub book: &'a ConceptBook,
    pub keyframes: &'a KeyframeSet,
    pub cameras: &'a CameraFile,
    pub prompt: Condition,
    pub config: EditConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub iteration: usize,
    pub t: usize,
    pub v: f64,
    pub keyframe: String,
    pub grad_norm: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditLog {
    pub records: Vec<EditRecord>,
}

const EDIT_LOG_HEADER: &str = "iteration,t,v,keyframe,grad_norm,entropy";

impl EditLog {
    fn row(r: &EditRecord) -> String {
        format!("{},{},{},{},{},{}", r.iteration, r.t, r.v, r.keyframe, r.grad_norm, r.entropy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(EDIT_LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&Self::row(r));
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            what: "edit log",
            position: format!("line {line}"),
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == EDIT_LOG_HEADER => {}
            Some((_, h)) => return Err(err(1, format!("unexpected header `{h}`"))),
            None => {
                return Err(Error::Truncated {
                    what: "edit log",
                    detail: "empty input".into(),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err(n, format!("expected 6 fields, found {}", f.len())));
            }
            let int = |s: &str| s.trim().parse::<usize>().map_err(|e| err(n, format!("`{s}`: {e}")));
            let float = |s: &str| s.trim().parse::<f64>().map_err(|e| err(n, format!("`{s}`: {e}")));
            let r = EditRecord {
                iteration: int(f[0])?,
                t: int(f[1])?,
                v: float(f[2])?,
                keyframe: f[3].trim().to_string(),
                grad_norm: float(f[4])?,
                entropy: float(f[5])?,
            };
            if let Some(prev) = records.last().map(|p: &EditRecord| p.iteration) {
                if r.iteration <= prev {
                    return Err(err(n, format!("iteration {} does not follow {prev}", r.iteration)));
                }
            }
            records.push(r);
        }
        Ok(Self { records })
    }

    /// Append records to `path`, writing the header if the file is new.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut s = String::new();
        if fresh {
            s.push_str(EDIT_LOG_HEADER);
            s.push('\n');
        }
        for r in &self.records {
            s.push_str(&Self::row(r));
            s.push('\n');
        }
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub avatar: DynamicAvatar,
    pub log: EditLog,
    pub skipped: usize,
}

/// Gradient of one distillation step with respect to the appearance groups.
#[derive(Clone, Debug)]
pub struct DistillGrad {
    pub grads: ParamVector,
    pub entropy: f64,
    pub upstream_norm: f64,
}

/// Render `camera` at `frame` as a `[1, 3, S, S]` signed image (bilinearly
/// upsampled when `size` is twice the camera size) plus per-ray opacity.
pub fn render_signed(
    avatar: &DynamicAvatar,
    g: &mut Graph,
    b: &ParamBinding,
    camera: &Camera,
    frame: usize,
    size: usize,
    rng: Option<&mut SeedRng>,
) -> Result<(Var, Var)> {
    let (w, h) = (camera.width, camera.height);
    if w != h || (size != w && size != 2 * w) {
        return Err(Error::shape(
            "render_signed",
            format!("{w}x{h} render cannot feed a {size}x{size} denoiser"),
        ));
    }
    let rays = generate_rays(camera, &all_pixels(camera), &avatar.config.bounds)?;
    let out = avatar.render_rays(g, b, &rays, &vec![frame; rays.len()], rng)?;
    let rgb = g.slice(out.rgba, 0, 3)?;
    let omega = g.slice(out.rgba, 3, 1)?;
    let planar = g.transpose(rgb)?;
    let img = g.reshape(planar, &[1, 3, h, w])?;
    let img = if size == w { img } else { upsample_bilinear2(g, img)? };
    let two = g.scale(img, 2.0)?;
    let one = g.constant(Tensor::new(vec![1, 3, size, size], vec![1.0; 3 * size * size])?)?;
    Ok((g.sub(two, one)?, omega))
}

/// Render, encode, ask `upstream` for the ascent direction in model space,
/// and backpropagate `-<z, upstream(z)> + lambda * entropy` into the
/// appearance parameters. Denoisers never enter the graph.
#[allow(clippy::too_many_arguments)]
pub fn distill_step<F>(
    avatar: &DynamicAvatar,
    ae: &AutoencoderPair,
    camera: &Camera,
    frame: usize,
    lambda_entropy: f64,
    rng: Option<&mut SeedRng>,
    upstream: F,
) -> Result<DistillGrad>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let b = g.bind(&avatar.params, is_appearance)?;
    let ab = g.bind(&ae.params, |_| false)?;
    let (x, omega) = render_signed(avatar, &mut g, &b, camera, frame, ae.config.size, rng)?;
    let z = ae.encode_graph(&mut g, &ab, x)?;
    let up = upstream(g.value(z))?;
    if up.shape() != g.value(z).shape() {
        return Err(Error::shape("distill_step", format!("upstream {:?} vs {:?}", up.shape(), g.value(z).shape())));
    }
    let upstream_norm = up.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let neg: Tensor = Tensor::new(up.shape().to_vec(), up.data().iter().map(|v| -v).collect())?;
    let mut loss = g.dot_const(z, neg)?;
    let ent = entropy_mean(&mut g, omega)?;
    let entropy = g.value(ent).data()[0];
    if lambda_entropy > 0.0 {
        let e = g.scale(ent, lambda_entropy)?;
        loss = g.add(loss, e)?;
    }
    let grads = g.backward(loss)?;
    Ok(DistillGrad {
        grads: b.collect(&grads, &avatar.params),
        entropy,
        upstream_norm,
    })
}

fn check_task(task: &EditTask) -> Result<()> {
    let cfg = &task.config;
    cfg.guidance.validate(task.schedule.steps())?;
    if task.keyframes.is_empty() {
        return Err(Error::invalid("editing needs at least one keyframe"));
    }
    task.keyframes.validate()?;
    for e in &task.keyframes.entries {
        if e.camera >= task.cameras.cameras.len() || e.frame >= task.avatar.frames {
            return Err(Error::invalid(format!(
                "keyframe (camera {}, frame {}) is outside the rig or the avatar",
                e.camera, e.frame
            )));
        }
        task.book.identifier(&e.identifier, &task.keyframes.class)?;
    }
    let (c, s) = task.autoencoder.latent_shape();
    if task.base.config.channels != c || task.base.config.size != s {
        return Err(Error::Config(format!(
            "denoiser works on [{}, {}, {}] but the autoencoder yields [{c}, {s}, {s}]",
            task.base.config.channels, task.base.config.size, task.base.config.size
        )));
    }
    if task.prompt.embedding.len() != task.base.config.cond_dim {
        return Err(Error::Config("edit prompt width differs from the denoiser condition width".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("edit lr {} must be positive", cfg.lr)));
    }
    Ok(())
}

/// Optimise a copy of the avatar's appearance towards `task.prompt`.
/// `on_checkpoint(iteration, avatar)` runs every `checkpoint_every` steps.
pub fn edit(
    task: &EditTask,
    rng: &mut SeedRng,
    on_checkpoint: &mut dyn FnMut(usize, &DynamicAvatar) -> Result<()>,
) -> Result<EditOutcome> {
    check_task(task)?;
    let cfg = &task.config;
    let gcfg = &cfg.guidance;
    let image = task.autoencoder.config.size;
    let r = cfg.render_size.unwrap_or(image / 2);
    let mut avatar = task.avatar.clone();
    let frozen = (avatar.params.fingerprint(DEFORMATION), avatar.params.fingerprint(EMBEDDINGS));
    let mut state = AdamState::new(&avatar.params);
    let mut log = EditLog::default();
    let mut skipped = 0usize;
    let (mut pick, mut noise, mut render) = (rng.fork("edit.pick"), rng.fork("edit.noise"), rng.fork("edit.render"));
    let (c, s) = task.autoencoder.latent_shape();
    let n = cfg.iterations;
    for i in 0..n {
        let kf = &task.keyframes.entries[pick.below(task.keyframes.len())];
        let camera = task.cameras.cameras[kf.camera].camera.resized(r, r);
        let s_i = task.book.identifier(&kf.identifier, &task.keyframes.class)?;
        let tmax = anneal_tmax(i, n, gcfg);
        let t = pick.int_inclusive(gcfg.t_min.min(tmax), tmax);
        let v = v_schedule(t, gcfg);
        let eps = Tensor::new(vec![1, c, s, s], noise.normal_vec(c * s * s))?;
        let step = distill_step(&avatar, task.autoencoder, &camera, kf.frame, cfg.lambda_entropy, Some(&mut render), |z| {
            let x_t = noise_render(z, t, &eps, task.schedule, gcfg.noising)?;
            let psi = guided_noise(task.base, task.finetuned, &x_t, t, &task.prompt, &s_i, gcfg.w, v)?;
            sds_grad(&eps, &psi, t, task.schedule, gcfg.weighting)
        });
        let step = match step {
            Ok(st) if st.grads.is_finite() && st.entropy.is_finite() => st,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                skipped += 1;
                log::warn!("edit iteration {i}: non-finite gradient, skipped ({skipped} so far)");
                if skipped as f64 > cfg.max_skip_fraction * n as f64 {
                    return Err(Error::Aborted(format!("{skipped} of {n} edit iterations had non-finite gradients")));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        adam_step_groups(&mut avatar.params, &step.grads, &mut state, &AdamConfig::with_lr(cfg.lr), |name| {
            is_appearance(name).then_some(1.0)
        })
        .map_err(|e| Error::Diverged {
            step: i,
            detail: e.to_string(),
        })?;
        log.records.push(EditRecord {
            iteration: i,
            t,
            v,
            keyframe: kf.identifier.clone(),
            grad_norm: step.upstream_norm,
            entropy: step.entropy,
        });
        if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(i + 1, &avatar)?;
        }
    }
    if (avatar.params.fingerprint(DEFORMATION), avatar.params.fingerprint(EMBEDDINGS)) != frozen {
        return Err(Error::invalid("frozen avatar groups changed during editing"));
    }
    Ok(EditOutcome { avatar, log, skipped })
}
