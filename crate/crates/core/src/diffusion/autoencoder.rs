//! Optional latent space: a small conv encoder/decoder with 2x downscale.
//! In pixel mode both maps are the identity on `[-1, 1]` images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainLog;
use crate::diffmath::conv::{avg_pool2, conv2d, upsample_nearest2};
use crate::diffmath::{
    adam_step, container, Activation, AdamConfig, AdamState, Graph, ParamBinding, ParamVector, SeedRng, Tensor, Var,
};
use crate::volren::Image;
use crate::{Error, Result};

pub const AUTOENCODER: &str = "autoencoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    Pixel,
    Latent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub mode: LatentMode,
    /// Image size (square).
    pub size: usize,
    pub latent_channels: usize,
    pub width: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            mode: LatentMode::Pixel,
            size: 32,
            latent_channels: 4,
            width: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            lr: 4e-3,
            log_every: 50,
        }
    }
}

const ENCODER: [&str; 2] = ["encoder.c1", "encoder.c2"];
const DECODER: [&str; 3] = ["decoder.c1", "decoder.c2", "decoder.c3"];

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderPair {
    pub config: AutoencoderConfig,
    pub params: ParamVector,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: AutoencoderConfig,
}

fn names(layer: &str) -> (String, String) {
    (format!("{AUTOENCODER}.{layer}.weight"), format!("{AUTOENCODER}.{layer}.bias"))
}

impl AutoencoderPair {
    pub fn pixel(size: usize) -> Self {
        Self {
            config: AutoencoderConfig {
                mode: LatentMode::Pixel,
                size,
                ..AutoencoderConfig::default()
            },
            params: ParamVector::new(),
        }
    }

    pub fn new(config: AutoencoderConfig, rng: &mut SeedRng) -> Result<Self> {
        if config.size < 2 || config.size % 2 != 0 {
            return Err(Error::Config(format!("autoencoder size {} must be even", config.size)));
        }
        let mut params = ParamVector::new();
        if config.mode == LatentMode::Latent {
            if config.latent_channels == 0 || config.width == 0 {
                return Err(Error::Config("autoencoder widths must be positive".into()));
            }
            let (w, l) = (config.width, config.latent_channels);
            let mut r = rng.fork("autoencoder");
            let layers = [
                (ENCODER[0], 3, w),
                (ENCODER[1], w, l),
                (DECODER[0], l, w),
                (DECODER[1], w, w),
                (DECODER[2], w, 3),
            ];
            for (name, ci, co) in layers {
                let (wn, bn) = names(name);
                let std = (1.0 / (ci * 9) as f64).sqrt();
                params.add_group(&wn, &[co, ci, 3, 3], r.normal_vec(co * ci * 9).into_iter().map(|v| v * std).collect())?;
                params.add_group(&bn, &[co], vec![0.0; co])?;
            }
        }
        Ok(Self { config, params })
    }

    /// `(channels, size)` of the space the denoiser works in.
    pub fn latent_shape(&self) -> (usize, usize) {
        match self.config.mode {
            LatentMode::Pixel => (3, self.config.size),
            LatentMode::Latent => (self.config.latent_channels, self.config.size / 2),
        }
    }

    fn conv(g: &mut Graph, b: &ParamBinding, x: Var, layer: &str, act: Activation) -> Result<Var> {
        let (wn, bn) = names(layer);
        let y = conv2d(g, x, b.var(&wn)?, b.var(&bn)?)?;
        g.activation(y, act)
    }

    /// `x` is `[n, 3, S, S]` in `[-1, 1]`.
    pub fn encode_graph(&self, g: &mut Graph, b: &ParamBinding, x: Var) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.size || s[3] != self.config.size {
            return Err(Error::shape(
                "encode",
                format!("image {s:?}, expected [n,3,{},{}]", self.config.size, self.config.size),
            ));
        }
        match self.config.mode {
            LatentMode::Pixel => Ok(x),
            LatentMode::Latent => {
                let h = Self::conv(g, b, x, ENCODER[0], Activation::Silu)?;
                let h = avg_pool2(g, h)?;
                Self::conv(g, b, h, ENCODER[1], Activation::Identity)
            }
        }
    }

    pub fn decode_graph(&self, g: &mut Graph, b: &ParamBinding, z: Var) -> Result<Var> {
        let (c, s) = self.latent_shape();
        let zs = g.value(z).shape().to_vec();
        if zs.len() != 4 || zs[1] != c || zs[2] != s || zs[3] != s {
            return Err(Error::shape("decode", format!("latent {zs:?}, expected [n,{c},{s},{s}]")));
        }
        match self.config.mode {
            LatentMode::Pixel => Ok(z),
            LatentMode::Latent => {
                let h = upsample_nearest2(g, z)?;
                let h = Self::conv(g, b, h, DECODER[0], Activation::Silu)?;
                let h = Self::conv(g, b, h, DECODER[1], Activation::Silu)?;
                Self::conv(g, b, h, DECODER[2], Activation::Identity)
            }
        }
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.width != self.config.size || img.height != self.config.size {
            return Err(Error::shape(
                "encode",
                format!("image {}x{}, autoencoder expects {}", img.width, img.height, self.config.size),
            ));
        }
        Ok(())
    }

    /// Latent `[C, S', S']` of an image.
    pub fn encode(&self, img: &Image) -> Result<Tensor> {
        self.check_image(img)?;
        let x = img.to_signed_chw();
        let (c, s) = self.latent_shape();
        let mut g = Graph::new();
        let b = g.bind(&self.params, |_| false)?;
        let xv = g.constant(x)?;
        let z = self.encode_graph(&mut g, &b, xv)?;
        g.value(z).clone().reshape(vec![c, s, s])
    }

    pub fn decode(&self, z: &Tensor) -> Result<Image> {
        let (c, s) = self.latent_shape();
        if z.len() != c * s * s {
            return Err(Error::shape("decode", format!("latent {:?}", z.shape())));
        }
        let mut g = Graph::new();
        let b = g.bind(&self.params, |_| false)?;
        let zv = g.constant(z.clone().reshape(vec![1, c, s, s])?)?;
        let x = self.decode_graph(&mut g, &b, zv)?;
        Image::from_signed_chw(g.value(x), 0)
    }

    fn meta(&self) -> String {
        serde_json::to_string(&Meta {
            kind: "autoencoder".into(),
            config: self.config.clone(),
        })
        .expect("autoencoder meta serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::encode(&self.params, &self.meta(), container::Dtype::F64)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = container::decode(bytes)?;
        let meta: Meta = serde_json::from_str(&ck.meta).map_err(|e| Error::Format {
            what: "autoencoder checkpoint",
            detail: e.to_string(),
        })?;
        if meta.kind != "autoencoder" {
            return Err(Error::Format {
                what: "autoencoder checkpoint",
                detail: format!("checkpoint holds `{}`", meta.kind),
            });
        }
        let mut fresh = Self::new(meta.config, &mut SeedRng::new(0))?;
        if !fresh.params.same_layout(&ck.params) {
            return Err(Error::Format {
                what: "autoencoder checkpoint",
                detail: "parameter groups do not match the stored config".into(),
            });
        }
        fresh.params = ck.params;
        Ok(fresh)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Fit encoder and decoder to reconstruct `images`. A no-op in pixel mode.
pub fn train_autoencoder(
    ae: &mut AutoencoderPair,
    images: &[Image],
    cfg: &AutoencoderTrainConfig,
    rng: &mut SeedRng,
) -> Result<TrainLog> {
    let mut log = TrainLog::new(&["reconstruction"]);
    if ae.config.mode == LatentMode::Pixel {
        return Ok(log);
    }
    if images.is_empty() {
        return Err(Error::invalid("autoencoder training needs images"));
    }
    for img in images {
        ae.check_image(img)?;
    }
    let data: Vec<Tensor> = images.iter().map(|i| i.to_signed_chw()).collect();
    let s = ae.config.size;
    let mut state = AdamState::new(&ae.params);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch * 3 * s * s);
        for _ in 0..cfg.batch {
            batch.extend_from_slice(data[rng.below(data.len())].data());
        }
        let x = Tensor::new(vec![cfg.batch, 3, s, s], batch)?;
        let mut g = Graph::new();
        let b = g.bind(&ae.params, |_| true)?;
        let xv = g.constant(x)?;
        let z = ae.encode_graph(&mut g, &b, xv)?;
        let y = ae.decode_graph(&mut g, &b, z)?;
        let loss = g.mse(y, xv)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite autoencoder loss".into(),
            });
        }
        let grads = g.backward(loss)?;
        let grads = b.collect(&grads, &ae.params);
        // Cosine decay to 5% keeps the tail of training stable.
        let lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos()));
        adam_step(&mut ae.params, &grads, &mut state, &AdamConfig::with_lr(lr)).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log.push(step, lv, &[lv]);
        }
    }
    Ok(log)
}
