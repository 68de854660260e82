//! Ablations: shared vs independent fine-tuning noise, guidance branches,
//! timestep annealing and the null edit.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::avatar::DynamicAvatar;
use crate::diffusion::{cfg_sample, finetune_multiconcept, Concept, TokenKind};
use crate::metrics::{foreground_mean_color, identity_drift, laplacian_energy, mean_channel_dominance, temporal_consistency};
use crate::pipeline::eval::{eval_views, frame_count, prompt_sign, render_views};
use crate::pipeline::stages::{files, load_autoencoder, load_avatar, load_base, load_cameras, load_edited, require, run_edit, schedule, stage_rng};
use crate::pipeline::{PipelineConfig, Stage, StageDir};
use crate::scenegen::{camera_ring, generate_scene, render_ground_truth};
use crate::volren::Image;
use crate::vtsds::EditConfig;
use crate::{Error, Result};

pub const ABLATE_DIR: &str = "ablate";
pub const REPORT: &str = "report.json";
pub const TABLE: &str = "table.txt";

/// Pixels with any channel below this count as foreground on white.
pub const FOREGROUND_THRESHOLD: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    SharedNoise,
    Guidance,
    Anneal,
    NullEdit,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::SharedNoise, Ablation::Guidance, Ablation::Anneal, Ablation::NullEdit];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::SharedNoise => "shared-noise",
            Ablation::Guidance => "guidance",
            Ablation::Anneal => "anneal",
            Ablation::NullEdit => "null-edit",
        }
    }

    /// Run, write `report.json` and `table.txt`, and return the table.
    pub fn run(self, cfg: &PipelineConfig) -> Result<String> {
        match self {
            Ablation::SharedNoise => Ok(shared_noise(cfg)?.table()),
            _ => Ok(edit_variant(cfg, self)?.table()),
        }
    }
}

fn ablation_dir(cfg: &PipelineConfig, a: Ablation) -> std::path::PathBuf {
    cfg.out.join(ABLATE_DIR).join(a.name())
}

fn finish<T: Serialize>(mut st: StageDir, report: &T, table: &str) -> Result<()> {
    st.write(REPORT, serde_json::to_string_pretty(report).expect("report serializes"))?;
    st.write(TABLE, table)?;
    st.note(table);
    st.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageArm {
    pub shared_noise: bool,
    pub hits: usize,
    /// Mean foreground colour of the samples drawn for each identifier.
    pub sample_means: [[f64; 3]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub trials: usize,
    pub target_seeds: [u64; 2],
    pub target_means: [[f64; 3]; 2],
    pub shared: LeakageArm,
    pub independent: LeakageArm,
}

impl LeakageReport {
    pub fn table(&self) -> String {
        let mut s = String::from("arm          hits  trials\n");
        for (name, arm) in [("shared", &self.shared), ("independent", &self.independent)] {
            let _ = writeln!(s, "{name:<12} {:>4}  {:>6}", arm.hits, self.trials);
        }
        s
    }
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Frontal frame-0 ground truth of scene `seed` at `size` pixels.
fn frontal_target(cfg: &PipelineConfig, seed: u64, size: usize) -> Result<Image> {
    let scene = generate_scene(seed, &cfg.scenegen.scene)?;
    let cams = camera_ring(&cfg.scenegen.rig)?;
    let rec = cams
        .cameras
        .iter()
        .find(|c| c.frontal)
        .ok_or_else(|| Error::invalid("rig has no frontal camera"))?;
    render_ground_truth(&scene, &rec.camera.resized(size, size), 0)
}

fn fg_mean(img: &Image) -> Option<[f64; 3]> {
    foreground_mean_color(img, FOREGROUND_THRESHOLD)
}

/// Two-keyframe fine-tune, once with shared and once with independent noise
/// from identical seeds, then score how often identifier-conditioned samples
/// are nearest (in foreground mean colour) to their own keyframe.
pub fn leakage_experiment(cfg: &PipelineConfig) -> Result<LeakageReport> {
    let lk = &cfg.ablate.leakage;
    let (base, book) = load_base(cfg)?;
    let ae = load_autoencoder(cfg)?;
    let sched = schedule(cfg)?;
    let size = ae.config.size;
    let rng = stage_rng(cfg, "ablate.shared-noise");

    let first = frontal_target(cfg, cfg.seed, size)?;
    let m0 = fg_mean(&first).ok_or_else(|| Error::invalid("first target has no foreground"))?;
    let mut best: Option<(f64, u64, Image, [f64; 3])> = None;
    for k in 1..=lk.candidates {
        let seed = cfg.seed.wrapping_add(k);
        let img = frontal_target(cfg, seed, size)?;
        if let Some(m) = fg_mean(&img) {
            let d = sq_dist(m, m0);
            if best.as_ref().is_none_or(|b| d > b.0) {
                best = Some((d, seed, img, m));
            }
        }
    }
    let (_, seed_b, second, m1) = best.ok_or_else(|| Error::invalid("no candidate target has a foreground"))?;
    let targets = [m0, m1];

    let ids = ["leakfirst0", "leaksecnd0"];
    let class = cfg.keyframes.class.as_str();
    let mut arms = Vec::new();
    for shared in [true, false] {
        let mut b = book.clone();
        let mut tok = rng.fork("identifiers");
        for id in ids {
            b.add(id, TokenKind::Identifier, &mut tok, cfg.keyframes.identifier_init)?;
        }
        let concepts = vec![
            Concept {
                identifier: ids[0].into(),
                image: first.clone(),
            },
            Concept {
                identifier: ids[1].into(),
                image: second.clone(),
            },
        ];
        let mut ft = cfg.diffusion.finetune.clone();
        ft.shared_noise = shared;
        let res = finetune_multiconcept(&base, &ae, &concepts, &mut b, class, &sched, &ft, &mut rng.fork("finetune"))?;
        let conds = [b.identifier(ids[0], class)?, b.identifier(ids[1], class)?];
        let mut hits = 0;
        let mut means = [[0.0; 3]; 2];
        let mut counts = [0usize; 2];
        for trial in 0..lk.trials {
            let which = trial % 2;
            let z = cfg_sample(
                &res.model,
                &conds[which],
                lk.guidance,
                &sched,
                lk.sample_steps,
                &mut rng.fork(&format!("trial{trial}")),
            )?;
            let Some(m) = fg_mean(&ae.decode(&z)?) else { continue };
            if sq_dist(m, targets[which]) < sq_dist(m, targets[1 - which]) {
                hits += 1;
            }
            counts[which] += 1;
            for k in 0..3 {
                means[which][k] += m[k];
            }
        }
        for (mean, &n) in means.iter_mut().zip(&counts) {
            *mean = mean.map(|v| v / n.max(1) as f64);
        }
        log::info!("leakage arm shared={shared}: {hits}/{}", lk.trials);
        arms.push(LeakageArm {
            shared_noise: shared,
            hits,
            sample_means: means,
        });
    }
    let independent = arms.pop().expect("two arms");
    let shared = arms.pop().expect("two arms");
    Ok(LeakageReport {
        trials: lk.trials,
        target_seeds: [cfg.seed, seed_b],
        target_means: targets,
        shared,
        independent,
    })
}

fn shared_noise(cfg: &PipelineConfig) -> Result<LeakageReport> {
    require(cfg, Stage::TrainDenoiser, files::BASE)?;
    require(cfg, Stage::TrainAutoencoder, files::AUTOENCODER)?;
    let st = StageDir::begin(cfg, ablation_dir(cfg, Ablation::SharedNoise))?;
    let report = leakage_experiment(cfg)?;
    finish(st, &report, &report.table())?;
    Ok(report)
}

/// Scores of one edited avatar over the evaluation views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditScores {
    pub dominance: f64,
    /// Dominance change towards the prompt.
    pub class_shift: f64,
    pub identity_drift: f64,
    pub laplacian_energy: f64,
    pub temporal_consistency: f64,
}

pub fn score_edit(
    cfg: &PipelineConfig,
    original: &DynamicAvatar,
    edited: &DynamicAvatar,
    prompt: &str,
) -> Result<EditScores> {
    let cameras = load_cameras(cfg)?;
    let views = eval_views(&cameras, frame_count(cfg), cfg.eval.frame_stride)?;
    let before = render_views(original, &cameras, &views)?;
    let after = render_views(edited, &cameras, &views)?;
    let frontal = cameras.cameras.iter().position(|c| c.frontal).expect("validated camera file");
    let seq: Vec<Image> = views
        .iter()
        .zip(&after)
        .filter(|((c, _), _)| *c == frontal)
        .map(|(_, i)| i.clone())
        .collect();
    let d_after = mean_channel_dominance(&after);
    Ok(EditScores {
        dominance: d_after,
        class_shift: prompt_sign(prompt) * (d_after - mean_channel_dominance(&before)),
        identity_drift: identity_drift(&before, &after)?,
        laplacian_energy: after.iter().map(laplacian_energy).sum::<f64>() / after.len() as f64,
        temporal_consistency: temporal_consistency(&seq)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditAblationReport {
    pub ablation: String,
    pub prompt: String,
    /// The `edit` stage's avatar; absent for the null edit.
    pub baseline: Option<EditScores>,
    pub variant: EditScores,
}

impl EditAblationReport {
    pub fn table(&self) -> String {
        let mut s = String::from("run        dominance  class_shift  drift    laplacian  temporal\n");
        let rows = [("default", self.baseline.as_ref()), ("variant", Some(&self.variant))];
        for (name, sc) in rows {
            if let Some(sc) = sc {
                let _ = writeln!(
                    s,
                    "{name:<10} {:>+9.4}  {:>+11.4}  {:>7.4}  {:>9.5}  {:>8.4}",
                    sc.dominance, sc.class_shift, sc.identity_drift, sc.laplacian_energy, sc.temporal_consistency
                );
            }
        }
        s
    }
}

/// The variant's edit config and prompt.
pub fn variant_config(cfg: &PipelineConfig, a: Ablation) -> (EditConfig, String) {
    let mut e = cfg.vtsds.edit.clone();
    let mut prompt = cfg.vtsds.prompt.clone();
    match a {
        Ablation::Guidance => {
            e.guidance.v_hi = 0.0;
            e.guidance.k = 0;
        }
        Ablation::Anneal => e.guidance.anneal = false,
        Ablation::NullEdit => prompt = cfg.keyframes.class.clone(),
        Ablation::SharedNoise => {}
    }
    (e, prompt)
}

fn edit_variant(cfg: &PipelineConfig, a: Ablation) -> Result<EditAblationReport> {
    let original = load_avatar(cfg)?;
    let baseline = match a {
        Ablation::NullEdit => None,
        _ => Some(load_edited(cfg)?),
    };
    let (edit_cfg, prompt) = variant_config(cfg, a);
    let mut snapshot = cfg.clone();
    snapshot.vtsds.edit = edit_cfg.clone();
    snapshot.vtsds.prompt = prompt.clone();
    let mut st = StageDir::begin(&snapshot, ablation_dir(cfg, a))?;
    let out = run_edit(cfg, &edit_cfg, &prompt, &mut st)?;
    let report = EditAblationReport {
        ablation: a.name().into(),
        prompt: prompt.clone(),
        baseline: baseline
            .map(|b| score_edit(cfg, &original, &b, &cfg.vtsds.prompt))
            .transpose()?,
        variant: score_edit(cfg, &original, &out.avatar, &prompt)?,
    };
    finish(st, &report, &report.table())?;
    Ok(report)
}

pub fn load_edit_report(cfg: &PipelineConfig, a: Ablation) -> Result<EditAblationReport> {
    let p = ablation_dir(cfg, a).join(REPORT);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| crate::volren::camera_file::json_error("ablation report", &e))
}

/// Checkpoint of the variant avatar written by an edit ablation.
pub fn variant_avatar_path(cfg: &PipelineConfig, a: Ablation) -> std::path::PathBuf {
    ablation_dir(cfg, a).join(files::AVATAR)
}
