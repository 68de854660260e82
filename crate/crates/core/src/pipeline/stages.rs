//! Stage runners. Every stage reads its inputs from the run directory, writes
//! its artifacts plus `config.toml` and `stage.log` into its own
//! subdirectory, and draws randomness from `seed` forked by stage name.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::avatar::{train_avatar, DynamicAvatar};
use crate::diffmath::SeedRng;
use crate::diffusion::{
    build_class_corpus, finetune_multiconcept, make_schedule, train_autoencoder, train_denoiser, AutoencoderPair, ConceptBook, Corpus,
    Denoiser, NoiseSchedule, TokenKind,
};
use crate::keyframes::{assign_identifiers, build_keyframe_set, select_temporal_frames, KeyframeSet};
use crate::pipeline::PipelineConfig;
use crate::scenegen::dataset::CAMERA_FILE;
use crate::scenegen::{build_dataset, MultiViewVideoDataset};
use crate::volren::{CameraFile, Image};
use crate::vtsds::{edit, EditConfig, EditOutcome, EditTask};
use crate::{Error, Result};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const STAGE_LOG: &str = "stage.log";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainAutoencoder,
    TrainDenoiser,
    TrainAvatar,
    SelectKeyframes,
    Finetune,
    Edit,
    Render,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::TrainAutoencoder,
        Stage::TrainDenoiser,
        Stage::TrainAvatar,
        Stage::SelectKeyframes,
        Stage::Finetune,
        Stage::Edit,
        Stage::Render,
        Stage::Eval,
    ];

    /// Subcommand name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainAutoencoder => "train-autoencoder",
            Stage::TrainDenoiser => "train-denoiser",
            Stage::TrainAvatar => "train-avatar",
            Stage::SelectKeyframes => "select-keyframes",
            Stage::Finetune => "finetune",
            Stage::Edit => "edit",
            Stage::Render => "render",
            Stage::Eval => "eval",
        }
    }

    /// Artifact directory under the run root.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenData => "data",
            Stage::TrainAutoencoder => "autoencoder",
            Stage::TrainDenoiser => "denoiser",
            Stage::TrainAvatar => "avatar",
            Stage::SelectKeyframes => "keyframes",
            Stage::Finetune => "finetune",
            Stage::Edit => "edit",
            Stage::Render => "render",
            Stage::Eval => "eval",
        }
    }

    pub fn run(self, cfg: &PipelineConfig) -> Result<()> {
        match self {
            Stage::GenData => gen_data(cfg),
            Stage::TrainAutoencoder => train_autoencoder_stage(cfg),
            Stage::TrainDenoiser => train_denoiser_stage(cfg),
            Stage::TrainAvatar => train_avatar_stage(cfg),
            Stage::SelectKeyframes => select_keyframes_stage(cfg),
            Stage::Finetune => finetune_stage(cfg),
            Stage::Edit => edit_stage(cfg),
            Stage::Render => crate::pipeline::eval::render_stage(cfg),
            Stage::Eval => crate::pipeline::eval::eval_stage(cfg),
        }
    }
}

/// Artifact file names shared between stages.
pub mod files {
    pub const SCENE: &str = "scene";
    pub const CORPUS: &str = "corpus";
    pub const AUTOENCODER: &str = "autoencoder.ckpt";
    pub const BASE: &str = "base.ckpt";
    pub const BOOK: &str = "book.ckpt";
    pub const TRAIN_LOG: &str = "train_log.csv";
    pub const AVATAR: &str = "avatar.ckpt";
    pub const REPORT: &str = "report.json";
    pub const FINETUNED: &str = "finetuned.ckpt";
    pub const NOISE_AUDIT: &str = "noise_audit.json";
    pub const EDIT_LOG: &str = "edit_log.csv";
    pub const SUMMARY: &str = "summary.json";
    pub const METRICS: &str = "metrics.json";
}

/// Path of `artifact` inside `stage`'s directory, or a dependency error
/// naming the stage that produces it.
pub fn require(cfg: &PipelineConfig, stage: Stage, artifact: &str) -> Result<PathBuf> {
    let p = cfg.out.join(stage.dir()).join(artifact);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingDependency {
            stage: stage.name().into(),
            artifact: p.display().to_string(),
        })
    }
}

pub fn stage_rng(cfg: &PipelineConfig, label: &str) -> SeedRng {
    SeedRng::new(cfg.seed).fork(label)
}

/// An open stage directory: snapshot written, log collected until `finish`.
pub struct StageDir {
    pub dir: PathBuf,
    log: String,
}

impl StageDir {
    pub fn begin(cfg: &PipelineConfig, dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        cfg.save(&dir.join(CONFIG_SNAPSHOT))?;
        Ok(Self { dir, log: String::new() })
    }

    pub fn for_stage(cfg: &PipelineConfig, stage: Stage) -> Result<Self> {
        Self::begin(cfg, cfg.out.join(stage.dir()))
    }

    pub fn note(&mut self, msg: impl AsRef<str>) {
        log::info!("{}", msg.as_ref());
        let _ = writeln!(self.log, "{}", msg.as_ref());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    pub fn finish(self) -> Result<()> {
        self.write(STAGE_LOG, self.log.as_bytes())
    }
}

pub fn schedule(cfg: &PipelineConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.diffusion.timesteps, cfg.diffusion.schedule)
}

pub fn load_dataset(cfg: &PipelineConfig) -> Result<MultiViewVideoDataset> {
    MultiViewVideoDataset::read(&require(cfg, Stage::GenData, files::SCENE)?)
}

pub fn load_cameras(cfg: &PipelineConfig) -> Result<CameraFile> {
    CameraFile::load(&require(cfg, Stage::GenData, &format!("{}/{CAMERA_FILE}", files::SCENE))?)
}

pub fn load_autoencoder(cfg: &PipelineConfig) -> Result<AutoencoderPair> {
    AutoencoderPair::load(&require(cfg, Stage::TrainAutoencoder, files::AUTOENCODER)?)
}

pub fn load_base(cfg: &PipelineConfig) -> Result<(Denoiser, ConceptBook)> {
    let model = Denoiser::load(&require(cfg, Stage::TrainDenoiser, files::BASE)?)?;
    let book = ConceptBook::load(&require(cfg, Stage::TrainDenoiser, files::BOOK)?)?;
    Ok((model, book))
}

pub fn load_avatar(cfg: &PipelineConfig) -> Result<DynamicAvatar> {
    DynamicAvatar::load(&require(cfg, Stage::TrainAvatar, files::AVATAR)?)
}

pub fn load_keyframes(cfg: &PipelineConfig) -> Result<KeyframeSet> {
    require(cfg, Stage::SelectKeyframes, crate::keyframes::KEYFRAME_MANIFEST_FILE)?;
    KeyframeSet::read(&cfg.out.join(Stage::SelectKeyframes.dir()))
}

pub fn load_finetuned(cfg: &PipelineConfig) -> Result<(Denoiser, ConceptBook)> {
    let model = Denoiser::load(&require(cfg, Stage::Finetune, files::FINETUNED)?)?;
    let book = ConceptBook::load(&require(cfg, Stage::Finetune, files::BOOK)?)?;
    Ok((model, book))
}

pub fn load_edited(cfg: &PipelineConfig) -> Result<DynamicAvatar> {
    DynamicAvatar::load(&require(cfg, Stage::Edit, files::AVATAR)?)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes")
}

fn gen_data(cfg: &PipelineConfig) -> Result<()> {
    let mut st = StageDir::for_stage(cfg, Stage::GenData)?;
    let ds = build_dataset(cfg.seed, &cfg.scenegen.scene, &cfg.scenegen.rig)?;
    ds.write(&st.path(files::SCENE))?;
    let (w, h) = ds.size();
    st.note(format!("dataset: {} cameras x {} frames at {w}x{h}", ds.camera_count(), ds.frames()));
    let corpus = build_class_corpus(cfg.diffusion.corpus_per_class, cfg.diffusion.autoencoder.size, cfg.seed)?;
    corpus.write(&st.path(files::CORPUS))?;
    st.note(format!("corpus: {} images", corpus.items.len()));
    st.finish()
}

fn load_corpus(cfg: &PipelineConfig) -> Result<Corpus> {
    Corpus::read(&require(cfg, Stage::GenData, files::CORPUS)?)
}

fn train_autoencoder_stage(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let mut st = StageDir::for_stage(cfg, Stage::TrainAutoencoder)?;
    let rng = stage_rng(cfg, Stage::TrainAutoencoder.name());
    let mut ae = AutoencoderPair::new(cfg.diffusion.autoencoder.clone(), &mut rng.fork("init"))?;
    let log = train_autoencoder(&mut ae, &corpus.images(), &cfg.diffusion.autoencoder_train, &mut rng.fork("train"))?;
    ae.save(&st.path(files::AUTOENCODER))?;
    st.write(files::TRAIN_LOG, log.to_csv())?;
    st.note(format!("autoencoder {:?}: final loss {:?}", ae.config.mode, log.last_loss()));
    st.finish()
}

fn train_denoiser_stage(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let ae = load_autoencoder(cfg)?;
    let mut st = StageDir::for_stage(cfg, Stage::TrainDenoiser)?;
    let rng = stage_rng(cfg, Stage::TrainDenoiser.name());
    let d = &cfg.diffusion;
    let mut book = ConceptBook::new(d.denoiser.cond_dim)?;
    let mut tokens = rng.fork("book");
    for class in crate::pipeline::CLASSES {
        book.add(class, TokenKind::Class, &mut tokens, d.token_scale)?;
    }
    let samples = corpus.train_samples(&ae, &book)?;
    let (model, log) = train_denoiser(&samples, &d.denoiser, &schedule(cfg)?, &d.train, &mut rng.fork("train"))?;
    model.save(&st.path(files::BASE))?;
    book.save(&st.path(files::BOOK))?;
    st.write(files::TRAIN_LOG, log.to_csv())?;
    st.note(format!(
        "denoiser: {} steps, loss {:?} -> {:?}",
        d.train.steps,
        log.first_loss(),
        log.last_loss()
    ));
    st.finish()
}

fn train_avatar_stage(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let mut st = StageDir::for_stage(cfg, Stage::TrainAvatar)?;
    let rng = stage_rng(cfg, Stage::TrainAvatar.name());
    let mut avatar = DynamicAvatar::new(cfg.avatar.model.clone(), ds.frames(), &mut rng.fork("init"))?;
    let report = train_avatar(&mut avatar, &ds, &cfg.avatar.train, &mut rng.fork("train"))?;
    avatar.save(&st.path(files::AVATAR))?;
    st.write(files::REPORT, to_json(&report))?;
    st.note(format!(
        "avatar: {} steps, final loss {:.5}, {} clamped points",
        cfg.avatar.train.steps, report.final_loss, report.clamped_points
    ));
    st.finish()
}

fn select_keyframes_stage(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let avatar = load_avatar(cfg)?;
    let (_, mut book) = load_base(cfg)?;
    let mut st = StageDir::for_stage(cfg, Stage::SelectKeyframes)?;
    let mut rng = stage_rng(cfg, Stage::SelectKeyframes.name());
    let frames = select_temporal_frames(&avatar.embeddings()?, ds.fps, &cfg.keyframes)?;
    let mut set = build_keyframe_set(&ds, &frames, &cfg.keyframes.class)?;
    assign_identifiers(&mut set, &mut book, &mut rng, cfg.keyframes.identifier_init)?;
    set.write(&st.dir)?;
    book.save(&st.path(files::BOOK))?;
    st.note(format!("temporal keyframes at frames {frames:?}; {} keyframes total", set.len()));
    st.finish()
}

/// Keyframe concepts at the diffusion model's image size.
pub fn concepts_for(set: &KeyframeSet, ae: &AutoencoderPair) -> Result<Vec<crate::diffusion::Concept>> {
    let s = ae.config.size;
    let mut out = set.concepts()?;
    for c in &mut out {
        c.image = c.image.downsample(s, s)?;
    }
    Ok(out)
}

fn finetune_stage(cfg: &PipelineConfig) -> Result<()> {
    let set = load_keyframes(cfg)?;
    let book_path = require(cfg, Stage::SelectKeyframes, files::BOOK)?;
    let mut book = ConceptBook::load(&book_path)?;
    let (base, _) = load_base(cfg)?;
    let ae = load_autoencoder(cfg)?;
    let mut st = StageDir::for_stage(cfg, Stage::Finetune)?;
    let mut rng = stage_rng(cfg, Stage::Finetune.name());
    let concepts = concepts_for(&set, &ae)?;
    let res = finetune_multiconcept(
        &base,
        &ae,
        &concepts,
        &mut book,
        &set.class,
        &schedule(cfg)?,
        &cfg.diffusion.finetune,
        &mut rng,
    )?;
    res.model.save(&st.path(files::FINETUNED))?;
    book.save(&st.path(files::BOOK))?;
    st.write(files::TRAIN_LOG, res.log.to_csv())?;
    st.write(files::NOISE_AUDIT, to_json(&res.audit))?;
    let shared = res.audit.iter().filter(|a| a.is_shared()).count();
    st.note(format!(
        "fine-tuned on {} keyframes for {} steps; {shared}/{} batches shared noise",
        concepts.len(),
        cfg.diffusion.finetune.steps,
        res.audit.len()
    ));
    st.finish()
}

#[derive(serde::Serialize)]
struct EditSummary {
    iterations: usize,
    skipped: usize,
    prompt: String,
}

/// Run the editing loop with an explicit edit config and prompt, writing the
/// edited avatar and log into `dest`. Used by the `edit` stage and the
/// ablations.
pub fn run_edit(cfg: &PipelineConfig, config: &EditConfig, prompt: &str, st: &mut StageDir) -> Result<EditOutcome> {
    let avatar = load_avatar(cfg)?;
    let (ft, book) = load_finetuned(cfg)?;
    let (base, _) = load_base(cfg)?;
    let ae = load_autoencoder(cfg)?;
    let set = load_keyframes(cfg)?;
    let cameras = load_cameras(cfg)?;
    let sched = schedule(cfg)?;
    let task = EditTask {
        avatar: &avatar,
        base: &base,
        finetuned: &ft,
        autoencoder: &ae,
        schedule: &sched,
        book: &book,
        keyframes: &set,
        cameras: &cameras,
        prompt: book.edit(prompt)?,
        config: config.clone(),
    };
    let ckpt_dir = st.path("checkpoints");
    let mut save = |i: usize, av: &DynamicAvatar| -> Result<()> {
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        av.save(&ckpt_dir.join(format!("{i:06}.ckpt")))
    };
    let out = edit(&task, &mut stage_rng(cfg, Stage::Edit.name()), &mut save)?;
    out.avatar.save(&st.path(files::AVATAR))?;
    st.write(files::EDIT_LOG, out.log.to_csv())?;
    st.write(
        files::SUMMARY,
        to_json(&EditSummary {
            iterations: config.iterations,
            skipped: out.skipped,
            prompt: prompt.into(),
        }),
    )?;
    st.note(format!(
        "edited towards `{prompt}` for {} iterations ({} skipped)",
        config.iterations, out.skipped
    ));
    Ok(out)
}

fn edit_stage(cfg: &PipelineConfig) -> Result<()> {
    // Resolve dependencies before touching the output directory.
    for (stage, file) in [
        (Stage::Finetune, files::FINETUNED),
        (Stage::Finetune, files::BOOK),
        (Stage::TrainAvatar, files::AVATAR),
        (Stage::TrainDenoiser, files::BASE),
        (Stage::TrainAutoencoder, files::AUTOENCODER),
    ] {
        require(cfg, stage, file)?;
    }
    let mut st = StageDir::for_stage(cfg, Stage::Edit)?;
    run_edit(cfg, &cfg.vtsds.edit, &cfg.vtsds.prompt, &mut st)?;
    st.finish()
}

/// Directory of a rendered view: `<root>/<camera name>/<frame>.{png,vtfi}`.
pub fn view_paths(root: &Path, camera: &str, frame: usize) -> (PathBuf, PathBuf) {
    let d = root.join(camera);
    (d.join(format!("{frame:04}.png")), d.join(format!("{frame:04}.vtfi")))
}

pub fn save_view(root: &Path, camera: &str, frame: usize, img: &Image) -> Result<()> {
    let (png, raw) = view_paths(root, camera, frame);
    let d = root.join(camera);
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    img.save_png(&png)?;
    img.save_float(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_are_distinct() {
        let names: std::collections::HashSet<_> = Stage::ALL.iter().map(|s| s.name()).collect();
        let dirs: std::collections::HashSet<_> = Stage::ALL.iter().map(|s| s.dir()).collect();
        assert_eq!(names.len(), Stage::ALL.len());
        assert_eq!(dirs.len(), Stage::ALL.len());
    }

    #[test]
    fn missing_inputs_name_the_producing_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            out: tmp.path().to_path_buf(),
            ..PipelineConfig::ci()
        };
        let err = Stage::Edit.run(&cfg).unwrap_err();
        match err {
            Error::MissingDependency { stage, .. } => assert_eq!(stage, "finetune"),
            e => panic!("unexpected {e}"),
        }
        assert!(!tmp.path().join("edit").exists());
        match Stage::TrainDenoiser.run(&cfg).unwrap_err() {
            Error::MissingDependency { stage, .. } => assert_eq!(stage, "gen-data"),
            e => panic!("unexpected {e}"),
        }
    }
}
