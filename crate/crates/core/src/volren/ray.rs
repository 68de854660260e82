use serde::{Deserialize, Serialize};

use super::vec3::{self, Vec3};
use super::Camera;
use crate::diffmath::SeedRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, near: f64, far: f64) -> Result<Self> {
        let r = Self { origin, dir, near, far };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if (vec3::norm(self.dir) - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("ray direction is not unit length"));
        }
        if !(0.0 <= self.near && self.near < self.far) {
            return Err(Error::invalid(format!(
                "ray bounds must satisfy 0 <= near < far (got {}, {})",
                self.near, self.far
            )));
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> Vec3 {
        vec3::at(self.origin, self.dir, t)
    }
}

/// Bounding sphere of the scene; near/far bounds come from it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBounds {
    pub center: Vec3,
    pub radius: f64,
}

impl Default for SceneBounds {
    fn default() -> Self {
        Self {
            center: [0.0; 3],
            radius: 1.6,
        }
    }
}

impl SceneBounds {
    /// Near/far for a camera centred at `eye`.
    pub fn near_far(&self, eye: Vec3) -> (f64, f64) {
        let d = vec3::norm(vec3::sub(eye, self.center));
        ((d - self.radius).max(1e-3), d + self.radius)
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        let r = self.radius;
        let c = self.center;
        ([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r])
    }
}

/// One ray per pixel centre.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)], bounds: &SceneBounds) -> Result<Vec<Ray>> {
    camera.validate()?;
    let origin = camera.center();
    let (near, far) = bounds.near_far(origin);
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= camera.width || v >= camera.height {
                return Err(Error::invalid(format!(
                    "pixel ({u}, {v}) outside {}x{} image",
                    camera.width, camera.height
                )));
            }
            Ray::new(origin, camera.direction(u as f64, v as f64), near, far)
        })
        .collect()
}

/// Every pixel of the image, row-major.
pub fn all_pixels(camera: &Camera) -> Vec<(usize, usize)> {
    (0..camera.height)
        .flat_map(|v| (0..camera.width).map(move |u| (u, v)))
        .collect()
}

/// `n` sample depths, one per equal stratum of `[near, far]`.
///
/// With `rng` each sample is uniform within its stratum; without it every
/// sample sits at its stratum midpoint.
pub fn stratified_samples(ray: &Ray, n: usize, rng: Option<&mut SeedRng>) -> Vec<f64> {
    assert!(n >= 2, "need at least two samples per ray");
    let step = (ray.far - ray.near) / n as f64;
    match rng {
        Some(rng) => (0..n)
            .map(|i| ray.near + (i as f64 + rng.uniform()) * step)
            .collect(),
        None => (0..n)
            .map(|i| ray.near + (i as f64 + 0.5) * step)
            .collect(),
    }
}

/// Segment length associated with each of `n` strata.
pub fn stratum_length(ray: &Ray, n: usize) -> f64 {
    (ray.far - ray.near) / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: usize, h: usize) -> Camera {
        Camera::look_at([0.3, 0.5, 4.0], [0.0; 3], [0.0, 1.0, 0.0], 45.0, w, h).unwrap()
    }

    #[test]
    fn principal_pixel_follows_optical_axis() {
        let c = cam(33, 17);
        let r = generate_rays(&c, &[(16, 8)], &SceneBounds::default()).unwrap();
        assert!(vec3::norm(vec3::sub(r[0].dir, c.forward())) < 1e-12);
    }

    #[test]
    fn corner_pixels_are_mirror_symmetric() {
        let mut c = cam(8, 6);
        c.rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        c.translation = [0.0; 3];
        let r = generate_rays(&c, &[(0, 0), (7, 5)], &SceneBounds { center: [0.0, 0.0, 5.0], radius: 1.0 }).unwrap();
        let (a, b) = (r[0].dir, r[1].dir);
        assert!((a[0] + b[0]).abs() < 1e-15 && (a[1] + b[1]).abs() < 1e-15);
        assert!((a[2] - b[2]).abs() < 1e-15);
    }

    #[test]
    fn rays_reproject_to_their_pixel() {
        let mut rng = SeedRng::new(1);
        for _ in 0..20 {
            let eye = [rng.uniform_range(-5.0, 5.0), rng.uniform_range(-2.0, 2.0), rng.uniform_range(3.0, 6.0)];
            let c = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], rng.uniform_range(20.0, 70.0), 40, 30).unwrap();
            let pix: Vec<_> = (0..10).map(|_| (rng.below(40), rng.below(30))).collect();
            let rays = generate_rays(&c, &pix, &SceneBounds::default()).unwrap();
            for (ray, &(u, v)) in rays.iter().zip(&pix) {
                let z = rng.uniform_range(1.0, 8.0);
                // Point at camera-space depth z along the ray.
                let cosang = vec3::dot(ray.dir, c.forward());
                let (pu, pv, depth) = c.project(ray.at(z / cosang)).unwrap();
                assert!((pu - u as f64).abs() < 1e-4 && (pv - v as f64).abs() < 1e-4);
                assert!((depth - z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        assert!(generate_rays(&cam(4, 4), &[(4, 0)], &SceneBounds::default()).is_err());
    }

    #[test]
    fn strata_bounds_and_midpoints() {
        let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.0, 1.0).unwrap();
        let mut rng = SeedRng::new(2);
        for _ in 0..100 {
            let t = stratified_samples(&ray, 2, Some(&mut rng));
            assert!((0.0..0.5).contains(&t[0]) && (0.5..1.0).contains(&t[1]));
        }
        let ray = Ray::new([0.0; 3], [1.0, 0.0, 0.0], 2.0, 6.0).unwrap();
        let mid = stratified_samples(&ray, 4, None);
        for (i, t) in mid.iter().enumerate() {
            assert_eq!(*t, 2.0 + (i as f64 + 0.5) * 1.0);
        }
    }

    #[test]
    fn sample_mean_is_centre_of_interval() {
        let ray = Ray::new([0.0; 3], [0.0, 1.0, 0.0], 1.0, 3.0).unwrap();
        let mut rng = SeedRng::new(8);
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let t = stratified_samples(&ray, 8, Some(&mut rng));
            assert!(t.windows(2).all(|w| w[0] < w[1]));
            total += t.iter().sum::<f64>() / 8.0;
        }
        let mean = total / draws as f64;
        assert!((mean - 2.0).abs() < 0.02, "{mean}");
    }
}
