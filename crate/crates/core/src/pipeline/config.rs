//! Whole-pipeline configuration: TOML in, TOML snapshot out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::avatar::{AvatarConfig, AvatarTrainConfig};
use crate::diffusion::{
    AutoencoderConfig, AutoencoderTrainConfig, DenoiserConfig, DenoiserTrainConfig, FinetuneConfig, LatentMode,
    ScheduleKind,
};
use crate::keyframes::KeyframeConfig;
use crate::scenegen::{RigConfig, SceneConfig};
use crate::volren::HashGridConfig;
use crate::vtsds::EditConfig;
use crate::{Error, Result};

/// The two toy classes the base denoiser learns.
pub const CLASSES: [&str; 2] = ["warm", "cool"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenegenStage {
    pub scene: SceneConfig,
    pub rig: RigConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvatarStage {
    pub model: AvatarConfig,
    pub train: AvatarTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionStage {
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub corpus_per_class: usize,
    /// Scale of the random class-token embeddings.
    pub token_scale: f64,
    pub autoencoder: AutoencoderConfig,
    pub autoencoder_train: AutoencoderTrainConfig,
    pub denoiser: DenoiserConfig,
    pub train: DenoiserTrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for DiffusionStage {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Cosine,
            timesteps: 1000,
            corpus_per_class: 64,
            token_scale: 1.0,
            autoencoder: AutoencoderConfig::default(),
            autoencoder_train: AutoencoderTrainConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: DenoiserTrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VtsdsStage {
    pub edit: EditConfig,
    /// Class token to edit towards.
    pub prompt: String,
}

impl Default for VtsdsStage {
    fn default() -> Self {
        Self {
            edit: EditConfig::default(),
            prompt: "cool".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalStage {
    /// Every camera is rendered at frames `0, stride, 2 stride, ...`; the
    /// frontal camera at every frame.
    pub frame_stride: usize,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self { frame_stride: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeakageConfig {
    pub trials: usize,
    pub sample_steps: usize,
    pub guidance: f64,
    /// Scenes `seed + 1 ..= seed + candidates` are searched for the second
    /// target, the one whose foreground colour is furthest from the first.
    pub candidates: u64,
}

impl Default for LeakageConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            sample_steps: 25,
            guidance: 1.0,
            candidates: 12,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateStage {
    pub leakage: LeakageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub scenegen: ScenegenStage,
    pub avatar: AvatarStage,
    pub diffusion: DiffusionStage,
    pub keyframes: KeyframeConfig,
    pub vtsds: VtsdsStage,
    pub eval: EvalStage,
    pub ablate: AblateStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("runs/default"),
            scenegen: ScenegenStage::default(),
            avatar: AvatarStage::default(),
            diffusion: DiffusionStage::default(),
            keyframes: KeyframeConfig::default(),
            vtsds: VtsdsStage::default(),
            eval: EvalStage::default(),
            ablate: AblateStage::default(),
        }
    }
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl PipelineConfig {
    /// Scaled-down settings that run end to end in minutes on one core:
    /// four frontal-arc cameras, 16 frames, 32x32 images.
    pub fn ci() -> Self {
        let mut c = Self {
            out: PathBuf::from("runs/ci"),
            ..Self::default()
        };
        c.scenegen.scene.frames = 16;
        c.scenegen.rig = RigConfig {
            cameras: 4,
            holdout_cameras: 2,
            width: 32,
            height: 32,
            arc_deg: 90.0,
            ..RigConfig::default()
        };
        c.avatar.model = AvatarConfig {
            deform_width: 32,
            deform_depth: 2,
            appearance_width: 32,
            appearance_depth: 1,
            samples_per_ray: 48,
            view_conditioning: false,
            grid: HashGridConfig {
                levels: 8,
                log2_table_size: 14,
                max_resolution: 256,
                ..HashGridConfig::default()
            },
            ..AvatarConfig::default()
        };
        c.avatar.train.steps = 1000;
        c.diffusion.autoencoder.size = 32;
        c.diffusion.denoiser.size = 32;
        c.diffusion.train.steps = 2000;
        c.keyframes.n_temporal = 2;
        c.vtsds.edit.iterations = 500;
        c.eval.frame_stride = 5;
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(toml_error)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Apply `stage.key=value` overrides. Values are read as TOML literals
    /// and fall back to bare strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(toml_error)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("bad override key `{key}`")));
            }
            let value = parse_literal(raw.trim());
            let mut node = &mut root;
            for part in &path[..path.len() - 1] {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not a table")))?;
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            }
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a table entry")))?;
            table.insert(path[path.len() - 1].to_string(), value);
        }
        let c: Self = root.try_into().map_err(toml_error)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} does not fit a TOML integer", self.seed));
        }
        self.scenegen.rig.validate()?;
        if self.scenegen.scene.frames < 2 {
            return bad("scenegen.scene.frames must be at least 2".into());
        }
        self.avatar.model.validate()?;
        let d = &self.diffusion;
        d.denoiser.validate()?;
        let ae = &d.autoencoder;
        let (c, s) = match ae.mode {
            LatentMode::Pixel => (3, ae.size),
            LatentMode::Latent => (ae.latent_channels, ae.size / 2),
        };
        if d.denoiser.channels != c || d.denoiser.size != s {
            return bad(format!(
                "denoiser input [{}, {}, {}] does not match the autoencoder output [{c}, {s}, {s}]",
                d.denoiser.channels, d.denoiser.size, d.denoiser.size
            ));
        }
        if ae.size < 2 || ae.size % 2 != 0 {
            return bad(format!("autoencoder.size {} must be even", ae.size));
        }
        if d.timesteps < 2 {
            return bad("diffusion.timesteps must be at least 2".into());
        }
        self.vtsds.edit.guidance.validate(d.timesteps)?;
        for (what, name) in [("keyframes.class", &self.keyframes.class), ("vtsds.prompt", &self.vtsds.prompt)] {
            if !CLASSES.contains(&name.as_str()) {
                return bad(format!("{what} `{name}` is not one of {CLASSES:?}"));
            }
        }
        if self.keyframes.n_temporal + 1 >= self.scenegen.scene.frames {
            return bad(format!(
                "{} temporal keyframes need more than {} frames",
                self.keyframes.n_temporal, self.scenegen.scene.frames
            ));
        }
        if self.eval.frame_stride == 0 {
            return bad("eval.frame_stride must be positive".into());
        }
        if self.ablate.leakage.trials == 0 || self.ablate.leakage.candidates == 0 {
            return bad("ablate.leakage needs trials > 0 and candidates > 0".into());
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
