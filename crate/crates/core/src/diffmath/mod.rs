//! Differentiable numerics: tensors, a reverse-mode tape, small networks,
//! Adam, finite-difference checks and the parameter container.
//!
//! Everything runs in `f64`. Gradient checks and training share the same
//! precision, so a passing check validates the exact code path used for
//! optimisation.

pub mod adam;
pub mod container;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod mlp;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{adam_step, adam_step_groups, prefix_schedule, AdamConfig, AdamState};
pub use gradcheck::{finite_difference, grad_check, relative_error};
pub use graph::{gradient, gradient_filtered, Activation, CustomOp, Gradients, Graph, ParamBinding, Var};
pub use mlp::{mlp_forward, Mlp};
pub use params::{hash_f64s, ParamGroup, ParamVector};
pub use rng::SeedRng;
pub use tensor::Tensor;
