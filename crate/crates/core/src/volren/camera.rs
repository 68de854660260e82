use serde::{Deserialize, Serialize};

use super::vec3::{self, Vec3};
use crate::{Error, Result};

/// Pinhole camera, OpenCV convention: camera `x` right, `y` down, `z`
/// forward. Pixel `(u, v)` has its centre at image coordinates `(u, v)`,
/// so the default principal point of a `W x H` image is
/// `((W - 1) / 2, (H - 1) / 2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with world `up` mapped to image up.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y_deg: f64, width: usize, height: usize) -> Result<Self> {
        let f = vec3::normalize(vec3::sub(target, eye));
        let r = vec3::cross(f, up);
        if vec3::norm(r) < 1e-9 {
            return Err(Error::invalid("look_at: view direction parallel to up"));
        }
        let r = vec3::normalize(r);
        let d = vec3::cross(f, r);
        let rotation = [r, d, f];
        let translation = vec3::scale(mat_vec(&rotation, eye), -1.0);
        let focal = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        let cam = Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid(format!(
                "degenerate intrinsics: fx={}, fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("non-finite principal point"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("empty image size"));
        }
        let err = orthonormality_error(&self.rotation);
        if !(err < 1e-6) {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (|R^T R - I| = {err:.3e})"
            )));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(())
    }

    /// Camera centre in world space, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        vec3::scale(mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    /// Optical axis in world space.
    pub fn forward(&self) -> Vec3 {
        self.rotation[2]
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        vec3::add(mat_vec(&self.rotation, p), self.translation)
    }

    /// Pixel coordinates and depth of a world point; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 1e-12 {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    /// Unit world-space direction through image coordinates `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let c = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        vec3::normalize(mat_t_vec(&self.rotation, c))
    }

    /// Copy with the image (and intrinsics) scaled to a new size.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            ..self.clone()
        }
    }
}

pub fn orthonormality_error(r: &[[f64; 3]; 3]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    if worst.is_nan() {
        f64::INFINITY
    } else {
        worst
    }
}

pub(crate) fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [vec3::dot(m[0], v), vec3::dot(m[1], v), vec3::dot(m[2], v)]
}

pub(crate) fn mat_t_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}
