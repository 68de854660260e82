//! View-and-time-aware score distillation: the base model steers towards
//! the edit prompt while the fine-tuned model, conditioned on the sampled
//! keyframe's identifier, keeps the subject recognisable.

mod edit;
mod guidance;

pub use edit::{distill_step, edit, render_signed, DistillGrad, EditConfig, EditLog, EditOutcome, EditRecord, EditTask};
pub use guidance::{
    anneal_tmax, guided_noise, noise_render, psi_combine, sds_grad, v_schedule, GuidanceConfig, Noising, Weighting,
};
