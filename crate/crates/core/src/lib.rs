//! Text/concept-driven editing of dynamic volumetric head avatars.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffmath`]: tensors, a reverse-mode tape, MLPs, Adam, gradient checks
//!   and the binary parameter container.
//! * [`volren`]: cameras, rays, hash-grid encoding and emission-absorption
//!   compositing.
//! * [`scenegen`]: a procedural deforming head rendered from a camera ring,
//!   standing in for a capture rig.
//! * [`avatar`]: deformation + appearance networks with per-frame time codes.
//! * [`diffusion`]: noise schedules, a small conditional denoiser, guided
//!   sampling and multi-concept fine-tuning.
//! * [`keyframes`]: keyframe selection and identifier assignment.
//! * [`vtsds`]: the mixed-guidance score distillation editing loop.
//! * [`pipeline`]: configuration and stage orchestration used by the CLI.

pub mod avatar;
pub mod diffmath;
pub mod diffusion;
pub mod keyframes;

pub mod error;

pub mod metrics;
pub mod pipeline;

pub mod scenegen;
pub mod volren;
pub mod vtsds;


pub use error::{Error, Result};
