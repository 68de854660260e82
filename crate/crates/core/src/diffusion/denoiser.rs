//! Small convolutional encoder-decoder predicting the noise in `z_t`.
//!
//! The timestep (sinusoidal) and the condition vector go through an MLP
//! whose output is split into per-block channel gains and shifts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::concept::Condition;
use crate::diffmath::conv::{avg_pool2, channel_bias, channel_scale, concat_channels, conv2d, upsample_nearest2};
use crate::diffmath::{container, Activation, Graph, Mlp, ParamBinding, ParamVector, SeedRng, Tensor, Var};
use crate::{Error, Result};

pub const DENOISER: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Spatial size of the (square) input; divisible by 4.
    pub size: usize,
    pub channels: usize,
    /// Base feature width; the bottleneck uses twice this.
    pub width: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub cond_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 3,
            width: 16,
            cond_dim: 16,
            time_dim: 16,
            cond_hidden: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 || self.size % 4 != 0 {
            return Err(Error::Config(format!("denoiser size {} must be a positive multiple of 4", self.size)));
        }
        if self.channels == 0 || self.width == 0 || self.cond_dim == 0 || self.cond_hidden == 0 {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("timestep embedding width must be even and positive".into()));
        }
        Ok(())
    }

    /// `(name, in, out)` for each convolution, in forward order.
    fn convs(&self) -> [(&'static str, usize, usize); 6] {
        let (c, w) = (self.channels, self.width);
        [
            ("enc1", c, w),
            ("enc2", w, 2 * w),
            ("mid", 2 * w, 2 * w),
            ("dec2", 4 * w, w),
            ("dec1", 2 * w, w),
            ("out", w, c),
        ]
    }

    /// Channels modulated by the conditioning MLP, one entry per hidden conv.
    fn shift_widths(&self) -> [usize; 5] {
        let w = self.width;
        [w, 2 * w, 2 * w, w, w]
    }

    pub fn element_count(&self) -> usize {
        self.channels * self.size * self.size
    }
}

/// Sinusoidal embedding of integer timesteps, `[n, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out.push((ti as f64 * freq).sin());
        }
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out.push((ti as f64 * freq).cos());
        }
    }
    Tensor::new(vec![t.len(), dim], out).expect("embedding shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamVector,
    cond: Mlp,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: DenoiserConfig,
}

fn conv_names(name: &str) -> (String, String) {
    (format!("{DENOISER}.{name}.weight"), format!("{DENOISER}.{name}.bias"))
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let total: usize = 2 * config.shift_widths().iter().sum::<usize>();
        let cond = Mlp::new(
            &format!("{DENOISER}.cond"),
            vec![config.time_dim + config.cond_dim, config.cond_hidden, total],
            Activation::Silu,
            Activation::Identity,
        );
        let mut params = ParamVector::new();
        let mut r = rng.fork("denoiser");
        cond.init(&mut params, &mut r, false)?;
        for (name, ci, co) in config.convs() {
            let (wn, bn) = conv_names(name);
            let std = (2.0 / (ci * 9) as f64).sqrt();
            let w = if name == "out" {
                vec![0.0; co * ci * 9]
            } else {
                r.normal_vec(co * ci * 9).into_iter().map(|v| v * std).collect()
            };
            params.add_group(&wn, &[co, ci, 3, 3], w)?;
            params.add_group(&bn, &[co], vec![0.0; co])?;
        }
        Ok(Self { config, params, cond })
    }

    /// Predicted noise for `z` (`[n, C, S, S]`) at timesteps `t` under
    /// conditions `cond` (`[n, cond_dim]`).
    pub fn forward(&self, g: &mut Graph, b: &ParamBinding, z: Var, t: &[usize], cond: Var) -> Result<Var> {
        let c = &self.config;
        let zs = g.value(z).shape().to_vec();
        if zs.len() != 4 || zs[1] != c.channels || zs[2] != c.size || zs[3] != c.size || zs[0] != t.len() {
            return Err(Error::shape(
                "denoiser",
                format!("input {zs:?} for {} timesteps, expected [n,{},{},{}]", t.len(), c.channels, c.size, c.size),
            ));
        }
        let cs = g.value(cond).shape().to_vec();
        if cs != [t.len(), c.cond_dim] {
            return Err(Error::shape("denoiser", format!("condition {cs:?}, expected [{}, {}]", t.len(), c.cond_dim)));
        }
        let temb = g.constant(timestep_embedding(t, c.time_dim))?;
        let h = g.concat(&[temb, cond])?;
        let film = self.cond.forward(g, b, h)?;
        let mut offset = 0;
        let mut mods = Vec::new();
        for w in c.shift_widths() {
            let gain = g.slice(film, offset, w)?;
            let ones = g.constant(Tensor::full(vec![t.len(), w], 1.0))?;
            let gain = g.add(gain, ones)?;
            let shift = g.slice(film, offset + w, w)?;
            mods.push((gain, shift));
            offset += 2 * w;
        }
        let conv = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
            let (wn, bn) = conv_names(name);
            conv2d(g, x, b.var(&wn)?, b.var(&bn)?)
        };
        let block = |g: &mut Graph, x: Var, name: &str, (gain, shift): (Var, Var)| -> Result<Var> {
            let y = conv(g, x, name)?;
            let y = channel_scale(g, y, gain)?;
            let y = channel_bias(g, y, shift)?;
            g.activation(y, Activation::Silu)
        };
        let h1 = block(g, z, "enc1", mods[0])?;
        let p1 = avg_pool2(g, h1)?;
        let h2 = block(g, p1, "enc2", mods[1])?;
        let p2 = avg_pool2(g, h2)?;
        let h3 = block(g, p2, "mid", mods[2])?;
        let u2 = upsample_nearest2(g, h3)?;
        let u2 = concat_channels(g, u2, h2)?;
        let d2 = block(g, u2, "dec2", mods[3])?;
        let u1 = upsample_nearest2(g, d2)?;
        let u1 = concat_channels(g, u1, h1)?;
        let d1 = block(g, u1, "dec1", mods[4])?;
        conv(g, d1, "out")
    }

    /// Value-only prediction for a batch.
    pub fn predict(&self, z: &Tensor, t: &[usize], cond: &[&[f64]]) -> Result<Tensor> {
        if cond.len() != t.len() {
            return Err(Error::shape("denoiser", format!("{} conditions for {} timesteps", cond.len(), t.len())));
        }
        let mut g = Graph::new();
        let b = g.bind(&self.params, |_| false)?;
        let zv = g.constant(z.clone())?;
        let flat: Vec<f64> = cond.iter().flat_map(|c| c.iter().copied()).collect();
        let cv = g.constant(Tensor::new(vec![t.len(), self.config.cond_dim], flat)?)?;
        let out = self.forward(&mut g, &b, zv, t, cv)?;
        Ok(g.value(out).clone())
    }

    fn meta(&self) -> String {
        serde_json::to_string(&Meta {
            kind: "denoiser".into(),
            config: self.config.clone(),
        })
        .expect("denoiser meta serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::encode(&self.params, &self.meta(), container::Dtype::F64)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = container::decode(bytes)?;
        let meta: Meta = serde_json::from_str(&ck.meta).map_err(|e| Error::Format {
            what: "denoiser checkpoint",
            detail: e.to_string(),
        })?;
        if meta.kind != "denoiser" {
            return Err(Error::Format {
                what: "denoiser checkpoint",
                detail: format!("checkpoint holds `{}`", meta.kind),
            });
        }
        let mut fresh = Self::new(meta.config, &mut SeedRng::new(0))?;
        if !fresh.params.same_layout(&ck.params) {
            return Err(Error::Format {
                what: "denoiser checkpoint",
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

/// Predicted noise `eps_hat(z_t, t, s)` for one item (`[C, S, S]` or
/// `[1, C, S, S]`); output has the input's shape.
pub fn denoiser_predict(model: &Denoiser, z_t: &Tensor, t: usize, s: &Condition) -> Result<Tensor> {
    let c = &model.config;
    if t == 0 {
        return Err(Error::invalid("denoiser timestep must be >= 1"));
    }
    if z_t.len() != c.element_count() {
        return Err(Error::shape("denoiser_predict", format!("input {:?}", z_t.shape())));
    }
    if s.embedding.len() != c.cond_dim {
        return Err(Error::shape("denoiser_predict", format!("condition width {}", s.embedding.len())));
    }
    let z = z_t.clone().reshape(vec![1, c.channels, c.size, c.size])?;
    let out = model.predict(&z, &[t], &[&s.embedding])?;
    out.reshape(z_t.shape().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{grad_check, gradient};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            size: 8,
            channels: 3,
            width: 4,
            cond_dim: 4,
            time_dim: 4,
            cond_hidden: 8,
        }
    }

    #[test]
    fn zero_final_layer_predicts_zero() {
        let m = Denoiser::new(tiny(), &mut SeedRng::new(1)).unwrap();
        let mut rng = SeedRng::new(2);
        let z = Tensor::new(vec![3, 8, 8], rng.normal_vec(192)).unwrap();
        let s = Condition::null(4);
        let e = denoiser_predict(&m, &z, 10, &s).unwrap();
        assert_eq!(e.shape(), &[3, 8, 8]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_is_deterministic_and_conditioned() {
        let mut m = Denoiser::new(tiny(), &mut SeedRng::new(1)).unwrap();
        let mut rng = SeedRng::new(3);
        for v in m.params.group_mut("denoiser.out.weight").unwrap() {
            *v = 0.1 * rng.normal();
        }
        let z = Tensor::new(vec![1, 3, 8, 8], rng.normal_vec(192)).unwrap();
        let s = Condition {
            embedding: vec![1.0, -1.0, 0.5, 0.0],
            tag: super::super::concept::ConditionTag::Null,
        };
        let a = denoiser_predict(&m, &z, 100, &s).unwrap();
        let b = denoiser_predict(&m, &z, 100, &s).unwrap();
        assert_eq!(a, b);
        let c = denoiser_predict(&m, &z, 100, &Condition::null(4)).unwrap();
        assert!(a.max_abs_diff(&c) > 1e-6);
        let d = denoiser_predict(&m, &z, 900, &s).unwrap();
        assert!(a.max_abs_diff(&d) > 1e-6);
        assert!(denoiser_predict(&m, &z, 0, &s).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut m = Denoiser::new(tiny(), &mut SeedRng::new(4)).unwrap();
        let mut rng = SeedRng::new(5);
        for v in m.params.group_mut("denoiser.out.weight").unwrap() {
            *v = 0.2 * rng.normal();
        }
        let z = Tensor::new(vec![2, 3, 8, 8], rng.normal_vec(384)).unwrap();
        let target = Tensor::new(vec![2, 3, 8, 8], rng.normal_vec(384)).unwrap();
        let cond = Tensor::new(vec![2, 4], rng.normal_vec(8)).unwrap();
        let loss = |params: &ParamVector| {
            let mut mm = m.clone();
            mm.params = params.clone();
            gradient(params, |g, b| {
                let zv = g.constant(z.clone())?;
                let cv = g.constant(cond.clone())?;
                let out = mm.forward(g, b, zv, &[7, 300], cv)?;
                let tv = g.constant(target.clone())?;
                g.mse(out, tv)
            })
            .unwrap()
        };
        let (_, grad) = loss(&m.params);
        // Check a spread of coordinates across every group.
        let idx: Vec<usize> = m
            .params
            .groups()
            .iter()
            .flat_map(|gr| {
                let r = gr.range();
                [r.start, r.start + gr.len() / 2, r.end - 1]
            })
            .collect();
        let base = m.params.clone();
        let f = |x: &[f64]| {
            let mut p = base.clone();
            for (&i, &v) in idx.iter().zip(x) {
                p.values_mut()[i] = v;
            }
            let (l, gr) = loss(&p);
            (l, idx.iter().map(|&i| gr.values()[i]).collect())
        };
        let x0: Vec<f64> = idx.iter().map(|&i| base.values()[i]).collect();
        assert!(grad_check(f, &x0, 1e-5) < 1e-4);
        assert_eq!(grad.len(), m.params.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Denoiser::new(tiny(), &mut SeedRng::new(6)).unwrap();
        let r = Denoiser::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(r, m);
        let bad = DenoiserConfig { size: 6, ..tiny() };
        assert!(Denoiser::new(bad, &mut SeedRng::new(0)).is_err());
    }
}
