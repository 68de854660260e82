//! Denoiser pre-training and the CSV training log.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::concept::Condition;
use super::denoiser::{Denoiser, DenoiserConfig};
use super::schedule::NoiseSchedule;
use crate::diffmath::{adam_step, AdamConfig, AdamState, Graph, SeedRng, Tensor};
use crate::{Error, Result};

/// Append-only `step,loss,<components...>` records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub columns: Vec<String>,
    pub rows: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub components: Vec<f64>,
}

impl TrainLog {
    pub fn new(components: &[&str]) -> Self {
        Self {
            columns: components.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, loss: f64, components: &[f64]) {
        debug_assert_eq!(components.len(), self.columns.len());
        self.rows.push(LogRow {
            step,
            loss,
            components: components.to_vec(),
        });
    }

    pub fn header(&self) -> String {
        let mut h = String::from("step,loss");
        for c in &self.columns {
            h.push(',');
            h.push_str(c);
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{}", r.step, r.loss));
            for c in &r.components {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Truncated {
            what: "training log",
            detail: "missing header".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "step" || cols[1] != "loss" {
            return Err(Error::Parse {
                what: "training log",
                position: "line 1".into(),
                message: "header must start with `step,loss`".into(),
            });
        }
        let mut log = Self::new(&cols[2..]);
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Parse {
                what: "training log",
                position: format!("line {}", i + 1),
                message: m,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(err(format!("{} fields, header has {}", fields.len(), cols.len())));
            }
            let step = fields[0].parse().map_err(|e| err(format!("step: {e}")))?;
            let mut vals = Vec::with_capacity(fields.len() - 1);
            for f in &fields[1..] {
                vals.push(f.parse::<f64>().map_err(|e| err(format!("value `{f}`: {e}")))?);
            }
            log.push(step, vals[0], &vals[1..]);
        }
        Ok(log)
    }

    /// Append rows to `path`, writing the header if the file is new.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let exists = path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = self.to_csv();
        if exists {
            text = text.split_once('\n').map(|(_, rest)| rest.to_string()).unwrap_or_default();
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// One training example in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// `[C, S, S]` image or latent.
    pub x: Tensor,
    pub cond: Condition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_final_ratio: f64,
    /// Probability of replacing the condition by the null condition.
    pub p_uncond: f64,
    pub log_every: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            lr_final_ratio: 0.05,
            p_uncond: 0.1,
            log_every: 50,
        }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config("denoiser training needs batch > 0, lr > 0, p_uncond in [0,1]".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_samples(model: &Denoiser, samples: &[TrainSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let c = &model.config;
    for s in samples {
        if s.x.len() != c.element_count() || s.cond.embedding.len() != c.cond_dim {
            return Err(Error::shape(
                "denoiser corpus",
                format!("sample {:?} / condition {}", s.x.shape(), s.cond.embedding.len()),
            ));
        }
    }
    Ok(())
}

pub(crate) fn batch_shape(c: &DenoiserConfig, n: usize) -> Vec<usize> {
    vec![n, c.channels, c.size, c.size]
}

/// Exponential decay from `lr` to `lr * ratio` over `steps`.
pub(crate) fn decayed_lr(lr: f64, ratio: f64, step: usize, steps: usize) -> f64 {
    lr * (ratio.max(1e-12).ln() * step as f64 / steps.max(1) as f64).exp()
}

/// Train a fresh denoiser on `samples` with the noise-prediction loss.
pub fn train_denoiser(
    samples: &[TrainSample],
    model_config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    rng: &mut SeedRng,
) -> Result<(Denoiser, TrainLog)> {
    cfg.validate()?;
    let mut model = Denoiser::new(model_config.clone(), &mut rng.fork("init"))?;
    check_samples(&model, samples)?;
    let c = model.config.clone();
    let mut state = AdamState::new(&model.params);
    let mut log = TrainLog::new(&["lr"]);
    let null = vec![0.0; c.cond_dim];
    for step in 0..cfg.steps {
        let mut z = Vec::with_capacity(cfg.batch * c.element_count());
        let mut eps = Vec::with_capacity(cfg.batch * c.element_count());
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut conds = Vec::with_capacity(cfg.batch * c.cond_dim);
        for _ in 0..cfg.batch {
            let s = &samples[rng.below(samples.len())];
            let t = rng.int_inclusive(1, schedule.steps());
            let e = rng.normal_vec(c.element_count());
            let (a, b) = (schedule.alpha(t), schedule.beta(t));
            z.extend(s.x.data().iter().zip(&e).map(|(x, e)| a * x + b * e));
            eps.extend(e);
            ts.push(t);
            if rng.uniform() < cfg.p_uncond {
                conds.extend_from_slice(&null);
            } else {
                conds.extend_from_slice(&s.cond.embedding);
            }
        }
        let mut g = Graph::new();
        let b = g.bind(&model.params, |_| true)?;
        let zv = g.constant(Tensor::new(batch_shape(&c, cfg.batch), z)?)?;
        let cv = g.constant(Tensor::new(vec![cfg.batch, c.cond_dim], conds)?)?;
        let pred = model.forward(&mut g, &b, zv, &ts, cv)?;
        let ev = g.constant(Tensor::new(batch_shape(&c, cfg.batch), eps)?)?;
        let loss = g.mse(pred, ev)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("denoiser loss is {lv}"),
            });
        }
        let grads = g.backward(loss)?;
        let grads = b.collect(&grads, &model.params);
        let lr = decayed_lr(cfg.lr, cfg.lr_final_ratio, step, cfg.steps);
        adam_step(&mut model.params, &grads, &mut state, &AdamConfig::with_lr(lr)).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::debug!("denoiser step {step}: loss {lv:.5}");
            log.push(step, lv, &[lr]);
        }
    }
    Ok((model, log))
}

/// Mean noise-prediction error over `draws` fixed `(sample, t, eps)`
/// triples drawn from `seed`; `cond` overrides the samples' conditions.
pub fn denoising_loss(
    model: &Denoiser,
    samples: &[TrainSample],
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
    cond: Option<&Condition>,
) -> Result<f64> {
    check_samples(model, samples)?;
    let c = &model.config;
    let mut rng = SeedRng::new(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    let chunk = 16;
    let mut left = draws;
    while left > 0 {
        let n = left.min(chunk);
        left -= n;
        let mut z = Vec::with_capacity(n * c.element_count());
        let mut eps = Vec::with_capacity(n * c.element_count());
        let mut ts = Vec::with_capacity(n);
        let mut conds: Vec<&[f64]> = Vec::with_capacity(n);
        for _ in 0..n {
            let s = &samples[rng.below(samples.len())];
            let t = rng.int_inclusive(1, schedule.steps());
            let e = rng.normal_vec(c.element_count());
            let (a, b) = (schedule.alpha(t), schedule.beta(t));
            z.extend(s.x.data().iter().zip(&e).map(|(x, e)| a * x + b * e));
            eps.extend(e);
            ts.push(t);
            conds.push(cond.map_or(&s.cond.embedding, |c| &c.embedding));
        }
        let pred = model.predict(&Tensor::new(batch_shape(c, n), z)?, &ts, &conds)?;
        total += pred.data().iter().zip(&eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>();
        count += pred.len();
    }
    Ok(total / count.max(1) as f64)
}
