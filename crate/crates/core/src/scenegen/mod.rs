//! Procedural synthetic scene standing in for a multi-camera capture.

pub mod corpus;
pub mod dataset;
pub mod render;
pub mod scene;

pub use corpus::{classify, render_class_sample};
pub use dataset::{build_dataset, DatasetManifest, MultiViewVideoDataset};
pub use render::{camera_ring, render_ground_truth, trace, Hit, RigConfig, BACKGROUND};
pub use scene::{generate_scene, Palette, SceneConfig, SyntheticScene};
