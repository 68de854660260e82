//! Multi-concept fine-tuning: one identifier per keyframe, shared noise
//! within each batch and class-prior preservation.

use serde::{Deserialize, Serialize};

use super::autoencoder::AutoencoderPair;
use super::concept::{token_group, ConceptBook, TokenKind};
use super::denoiser::Denoiser;
use super::sample::{cfg_sample_batch, SampleOptions};
use super::schedule::NoiseSchedule;
use super::train::{batch_shape, decayed_lr, TrainLog};
use crate::diffmath::{adam_step_groups, hash_f64s, AdamConfig, AdamState, Graph, ParamVector, SeedRng, Tensor, Var};
use crate::volren::Image;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_final_ratio: f64,
    /// Learning rate of identifier embeddings relative to `lr`.
    pub token_lr_scale: f64,
    /// One noise tensor per batch (off: every item draws its own).
    pub shared_noise: bool,
    /// One timestep per batch (off: every item draws its own).
    pub shared_timestep: bool,
    pub lambda_prior: f64,
    pub prior_images: usize,
    pub prior_guidance: f64,
    pub prior_sample_steps: usize,
    /// Scale of the random initial identifier embeddings.
    pub identifier_init: f64,
    pub log_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 3,
            lr: 3e-4,
            lr_final_ratio: 0.2,
            token_lr_scale: 10.0,
            shared_noise: true,
            shared_timestep: true,
            lambda_prior: 1.0,
            prior_images: 64,
            prior_guidance: 3.0,
            prior_sample_steps: 25,
            identifier_init: 1.0,
            log_every: 20,
        }
    }
}

/// An image to bind to a fresh identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Concept {
    pub identifier: String,
    pub image: Image,
}

/// Per-step record of the noise each batch item received.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseAudit {
    pub step: usize,
    pub timesteps: Vec<usize>,
    pub noise_hashes: Vec<u64>,
}

impl NoiseAudit {
    pub fn is_shared(&self) -> bool {
        self.noise_hashes.windows(2).all(|w| w[0] == w[1]) && self.timesteps.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub model: Denoiser,
    pub log: TrainLog,
    pub audit: Vec<NoiseAudit>,
    /// Class-prior samples drawn from the frozen base before fine-tuning.
    pub prior: Vec<Tensor>,
}

/// Class-conditioned samples from the frozen base model.
pub fn generate_prior(
    base: &Denoiser,
    book: &ConceptBook,
    class: &str,
    schedule: &NoiseSchedule,
    cfg: &FinetuneConfig,
    rng: &mut SeedRng,
) -> Result<Vec<Tensor>> {
    let cond = book.class(class)?;
    let c = &base.config;
    let opts = SampleOptions {
        guidance: cfg.prior_guidance,
        steps: cfg.prior_sample_steps,
        clip: c.channels == 3,
    };
    let mut out = Vec::with_capacity(cfg.prior_images);
    let chunk = 16;
    while out.len() < cfg.prior_images {
        let n = chunk.min(cfg.prior_images - out.len());
        let conds = vec![&cond; n];
        let batch = cfg_sample_batch(base, &conds, schedule, &opts, rng)?;
        let len = c.element_count();
        for i in 0..n {
            out.push(Tensor::new(
                vec![c.channels, c.size, c.size],
                batch.data()[i * len..(i + 1) * len].to_vec(),
            )?);
        }
    }
    Ok(out)
}

/// Stack `[1, d]` rows into `[n, d]`.
fn stack_rows(g: &mut Graph, rows: &[Var], d: usize) -> Result<Var> {
    let flat = g.concat(rows)?;
    g.reshape(flat, &[rows.len(), d])
}

/// Fine-tune a copy of `base` so that `identifier + class` reproduces each
/// concept image. New identifiers are registered in `book`; the base model
/// is left untouched.
#[allow(clippy::too_many_arguments)]
pub fn finetune_multiconcept(
    base: &Denoiser,
    ae: &AutoencoderPair,
    concepts: &[Concept],
    book: &mut ConceptBook,
    class: &str,
    schedule: &NoiseSchedule,
    cfg: &FinetuneConfig,
    rng: &mut SeedRng,
) -> Result<FinetuneResult> {
    if concepts.is_empty() || cfg.batch == 0 {
        return Err(Error::invalid("fine-tuning needs at least one concept and batch > 0"));
    }
    if book.dim != base.config.cond_dim {
        return Err(Error::Config(format!(
            "concept book width {} differs from denoiser condition width {}",
            book.dim, base.config.cond_dim
        )));
    }
    book.class(class)?;
    book.set_frozen(class, true)?;
    // Identifiers may arrive pre-registered (keyframe assignment); anything
    // else already in the book under that name is a collision.
    for (i, c) in concepts.iter().enumerate() {
        let clash = book.entry(&c.identifier).is_some_and(|e| e.kind != TokenKind::Identifier);
        if clash || concepts[..i].iter().any(|o| o.identifier == c.identifier) {
            return Err(Error::invalid(format!("identifier collision on `{}`", c.identifier)));
        }
    }
    let mut init = rng.fork("identifiers");
    for c in concepts {
        if book.entry(&c.identifier).is_none() {
            book.add(&c.identifier, TokenKind::Identifier, &mut init, cfg.identifier_init)?;
        }
    }
    let targets: Vec<Tensor> = concepts.iter().map(|c| ae.encode(&c.image)).collect::<Result<_>>()?;
    let mut prior_rng = rng.fork("prior");
    let prior = if cfg.lambda_prior > 0.0 && cfg.prior_images > 0 {
        generate_prior(base, book, class, schedule, cfg, &mut prior_rng)?
    } else {
        Vec::new()
    };

    let mut model = base.clone();
    let mc = model.config.clone();
    let d = mc.cond_dim;
    let len = mc.element_count();
    let id_groups: Vec<String> = concepts.iter().map(|c| token_group(&c.identifier)).collect();
    let is_id = |n: &str| id_groups.iter().any(|g| g == n);
    let mut model_state = AdamState::new(&model.params);
    let mut book_state = AdamState::new(&book.params);
    let mut log = TrainLog::new(&["concept", "prior"]);
    let mut audit = Vec::with_capacity(cfg.steps);
    let mut step_rng = rng.fork("steps");
    let n_prior = if prior.is_empty() { 0 } else { cfg.batch };
    let total = cfg.batch + n_prior;
    for step in 0..cfg.steps {
        let r = &mut step_rng;
        // Cycle through the concepts so every batch (batch >= #concepts)
        // holds each keyframe under the same noise.
        let picks: Vec<usize> = (0..cfg.batch).map(|j| (step * cfg.batch + j) % concepts.len()).collect();
        let prior_picks: Vec<usize> = (0..n_prior).map(|_| r.below(prior.len())).collect();
        let shared_eps = r.normal_vec(len);
        let shared_t = r.int_inclusive(1, schedule.steps());
        let mut z = Vec::with_capacity(total * len);
        let mut eps_all = Vec::with_capacity(total * len);
        let mut ts = Vec::with_capacity(total);
        let mut hashes = Vec::with_capacity(total);
        let sources = picks.iter().map(|&i| &targets[i]).chain(prior_picks.iter().map(|&i| &prior[i]));
        for x in sources {
            let eps = if cfg.shared_noise { shared_eps.clone() } else { r.normal_vec(len) };
            let t = if cfg.shared_timestep { shared_t } else { r.int_inclusive(1, schedule.steps()) };
            let (a, b) = (schedule.alpha(t), schedule.beta(t));
            z.extend(x.data().iter().zip(&eps).map(|(x, e)| a * x + b * e));
            hashes.push(hash_f64s(&eps));
            eps_all.extend(eps);
            ts.push(t);
        }
        audit.push(NoiseAudit {
            step,
            timesteps: ts.clone(),
            noise_hashes: hashes,
        });

        let mut g = Graph::new();
        let bm = g.bind(&model.params, |_| true)?;
        let bb = g.bind(&book.params, is_id)?;
        let class_row = g.constant(Tensor::new(vec![1, d], book.embedding(class)?.to_vec())?)?;
        let mut rows = Vec::with_capacity(total);
        for &i in &picks {
            let id = bb.var(&id_groups[i])?;
            let id = g.reshape(id, &[1, d])?;
            rows.push(g.add(id, class_row)?);
        }
        rows.extend(std::iter::repeat_n(class_row, n_prior));
        let cond = stack_rows(&mut g, &rows, d)?;
        let zv = g.constant(Tensor::new(batch_shape(&mc, total), z)?)?;
        let pred = model.forward(&mut g, &bm, zv, &ts, cond)?;
        let ev = g.constant(Tensor::new(batch_shape(&mc, total), eps_all)?)?;
        let diff = g.sub(pred, ev)?;
        // Per-element weights: mean over concept items plus lambda x mean
        // over prior items, applied as sqrt inside the square.
        let wc = (1.0 / (cfg.batch * len) as f64).sqrt();
        let wp = if n_prior > 0 { (cfg.lambda_prior / (n_prior * len) as f64).sqrt() } else { 0.0 };
        let mut wv = vec![wc; cfg.batch * len];
        wv.extend(std::iter::repeat_n(wp, n_prior * len));
        let wvar = g.constant(Tensor::new(batch_shape(&mc, total), wv)?)?;
        let weighted = g.mul(diff, wvar)?;
        let loss = g.sum_squares(weighted)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite fine-tuning loss".into(),
            });
        }
        let dv = g.value(diff).data();
        let concept_loss = dv[..cfg.batch * len].iter().map(|v| v * v).sum::<f64>() / (cfg.batch * len) as f64;
        let prior_loss = if n_prior > 0 {
            dv[cfg.batch * len..].iter().map(|v| v * v).sum::<f64>() / (n_prior * len) as f64
        } else {
            0.0
        };
        let grads = g.backward(loss)?;
        let gm = bm.collect(&grads, &model.params);
        let gb: ParamVector = bb.collect(&grads, &book.params);
        let lr = decayed_lr(cfg.lr, cfg.lr_final_ratio, step, cfg.steps);
        let diverged = |e: Error| Error::Diverged {
            step,
            detail: e.to_string(),
        };
        adam_step_groups(&mut model.params, &gm, &mut model_state, &AdamConfig::with_lr(lr), |_| Some(1.0))
            .map_err(diverged)?;
        adam_step_groups(&mut book.params, &gb, &mut book_state, &AdamConfig::with_lr(lr), |n| {
            is_id(n).then_some(cfg.token_lr_scale)
        })
        .map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::debug!("finetune step {step}: concept {concept_loss:.5} prior {prior_loss:.5}");
            log.push(step, lv, &[concept_loss, prior_loss]);
        }
    }
    Ok(FinetuneResult {
        model,
        log,
        audit,
        prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, DenoiserConfig, ScheduleKind};

    fn setup() -> (Denoiser, ConceptBook, AutoencoderPair, Vec<Concept>) {
        let cfg = DenoiserConfig {
            size: 8,
            width: 4,
            cond_dim: 4,
            time_dim: 4,
            cond_hidden: 8,
            ..DenoiserConfig::default()
        };
        let base = Denoiser::new(cfg, &mut SeedRng::new(1)).unwrap();
        let mut book = ConceptBook::new(4).unwrap();
        book.add("warm", TokenKind::Class, &mut SeedRng::new(2), 1.0).unwrap();
        let concepts = vec![
            Concept {
                identifier: "aaaaaaaaaa".into(),
                image: Image::filled(8, 8, [0.9, 0.4, 0.2]),
            },
            Concept {
                identifier: "bbbbbbbbbb".into(),
                image: Image::filled(8, 8, [0.6, 0.5, 0.4]),
            },
        ];
        (base, book, AutoencoderPair::pixel(8), concepts)
    }

    fn small_cfg(shared: bool) -> FinetuneConfig {
        FinetuneConfig {
            steps: 6,
            prior_images: 4,
            prior_sample_steps: 3,
            shared_noise: shared,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn shared_noise_audit_and_frozen_base() {
        let (base, mut book, ae, concepts) = setup();
        let before = base.clone();
        let s = make_schedule(50, ScheduleKind::Linear).unwrap();
        let class_before = book.embedding("warm").unwrap().to_vec();
        let r = finetune_multiconcept(&base, &ae, &concepts, &mut book, "warm", &s, &small_cfg(true), &mut SeedRng::new(3)).unwrap();
        assert_eq!(base, before);
        assert_ne!(r.model.params, base.params);
        assert_eq!(r.audit.len(), 6);
        assert!(r.audit.iter().all(|a| a.is_shared() && a.noise_hashes.len() == 6));
        assert_eq!(book.embedding("warm").unwrap(), class_before.as_slice());
        assert_eq!(r.prior.len(), 4);
        assert!(book.entry("aaaaaaaaaa").is_some());
    }

    #[test]
    fn independent_noise_differs_per_item() {
        let (base, mut book, ae, concepts) = setup();
        let s = make_schedule(50, ScheduleKind::Linear).unwrap();
        let r = finetune_multiconcept(&base, &ae, &concepts, &mut book, "warm", &s, &small_cfg(false), &mut SeedRng::new(3)).unwrap();
        assert!(r.audit.iter().all(|a| !a.is_shared()));
    }

    #[test]
    fn identifier_collisions_rejected() {
        let (base, mut book, ae, mut concepts) = setup();
        let s = make_schedule(50, ScheduleKind::Linear).unwrap();
        let dup = {
            let mut c = concepts.clone();
            c[1].identifier = c[0].identifier.clone();
            c
        };
        assert!(finetune_multiconcept(&base, &ae, &dup, &mut book.clone(), "warm", &s, &small_cfg(true), &mut SeedRng::new(3)).is_err());
        concepts[0].identifier = "warm".into();
        assert!(finetune_multiconcept(&base, &ae, &concepts, &mut book, "warm", &s, &small_cfg(true), &mut SeedRng::new(3)).is_err());
    }

    #[test]
    fn preregistered_identifiers_are_reused() {
        let (base, mut book, ae, concepts) = setup();
        let s = make_schedule(50, ScheduleKind::Linear).unwrap();
        book.add("aaaaaaaaaa", TokenKind::Identifier, &mut SeedRng::new(5), 1.0).unwrap();
        let before = book.embedding("aaaaaaaaaa").unwrap().to_vec();
        finetune_multiconcept(&base, &ae, &concepts, &mut book, "warm", &s, &small_cfg(true), &mut SeedRng::new(3)).unwrap();
        assert_ne!(book.embedding("aaaaaaaaaa").unwrap(), before.as_slice());
        assert!(book.entry("bbbbbbbbbb").is_some());
    }

    #[test]
    fn deterministic() {
        let (base, book, ae, concepts) = setup();
        let s = make_schedule(50, ScheduleKind::Linear).unwrap();
        let run = || {
            let mut b = book.clone();
            let r = finetune_multiconcept(&base, &ae, &concepts, &mut b, "warm", &s, &small_cfg(true), &mut SeedRng::new(4)).unwrap();
            (r.model, b, r.log)
        };
        assert_eq!(run(), run());
    }
}
