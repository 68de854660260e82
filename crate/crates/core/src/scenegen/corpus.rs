//! Palette-class head images for training the toy denoiser.

use super::render::{render_ground_truth, RigConfig};
use super::scene::{generate_scene, Palette, SceneConfig};
use crate::diffmath::SeedRng;
use crate::volren::{Camera, Image};
use crate::Result;

/// One random head of the given palette, seen from a random near-frontal
/// viewpoint, rendered at `size x size`.
pub fn render_class_sample(palette: Palette, rng: &mut SeedRng, size: usize) -> Result<Image> {
    let cfg = SceneConfig {
        frames: 1,
        palette,
        contrast: rng.uniform_range(0.6, 1.2),
        ..SceneConfig::default()
    };
    let scene = generate_scene(rng.below(u32::MAX as usize) as u64, &cfg)?;
    let rig = RigConfig::default();
    let az = rng.uniform_range(-50.0f64, 50.0).to_radians();
    let el = rng.uniform_range(-5.0f64, 15.0).to_radians();
    let d = rig.distance * rng.uniform_range(0.95, 1.08);
    let eye = [d * az.sin() * el.cos(), d * el.sin(), d * az.cos() * el.cos()];
    let cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], rig.fov_deg, size, size)?;
    render_ground_truth(&scene, &cam, 0)
}

/// Generating-rule classifier: which palette dominates the image.
pub fn classify(img: &Image) -> Palette {
    let m = img.mean_color();
    if m[2] > m[0] {
        Palette::Cool
    } else {
        Palette::Warm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_classified_by_their_palette() {
        let mut rng = SeedRng::new(11);
        for p in [Palette::Warm, Palette::Cool] {
            for _ in 0..10 {
                let img = render_class_sample(p, &mut rng, 16).unwrap();
                assert_eq!(classify(&img), p);
            }
        }
    }
}
