//! Dynamic head avatar: a deformation field into a canonical space, a
//! hash-grid radiance field over that space, and learned per-frame codes.

pub mod model;
pub mod posenc;
pub mod train;

pub use model::{
    is_appearance, AvatarConfig, DynamicAvatar, PointOutputs, RenderOutputs, APPEARANCE_GRID, APPEARANCE_MLP,
    DEFORMATION, EMBEDDINGS,
};
pub use train::{train_avatar, AvatarTrainConfig, TrainReport};
