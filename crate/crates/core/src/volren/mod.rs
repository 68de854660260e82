//! Cameras, rays, hash-grid encoding and emission-absorption rendering.

pub mod camera;
pub mod camera_file;
pub mod composite;
pub mod entropy;
pub mod hashgrid;
pub mod image;
pub mod ray;
pub mod vec3;

pub use camera::Camera;
pub use camera_file::{CameraFile, CameraRecord};
pub use composite::{composite, composite_graph, Composite, RaySamples};
pub use entropy::{entropy_mean, entropy_reg};
pub use hashgrid::{HashGrid, HashGridConfig};
pub use image::Image;
pub use ray::{all_pixels, generate_rays, stratified_samples, stratum_length, Ray, SceneBounds};
pub use vec3::Vec3;
