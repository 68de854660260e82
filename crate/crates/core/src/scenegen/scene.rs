//! Procedural deforming head: superellipsoid plus blobs, a smooth
//! palette texture, and a nod + jaw motion track.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffmath::SeedRng;
use crate::volren::vec3::{self, Vec3};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    Warm,
    Cool,
}

impl Palette {
    pub fn name(self) -> &'static str {
        match self {
            Palette::Warm => "warm",
            Palette::Cool => "cool",
        }
    }

    pub fn opposite(self) -> Palette {
        match self {
            Palette::Warm => Palette::Cool,
            Palette::Cool => Palette::Warm,
        }
    }

    pub fn from_name(s: &str) -> Option<Palette> {
        match s {
            "warm" => Some(Palette::Warm),
            "cool" => Some(Palette::Cool),
            _ => None,
        }
    }

    /// Jittered base skin colour for this palette.
    pub fn base_color(self, rng: &mut SeedRng) -> [f64; 3] {
        let hi = rng.uniform_range(0.72, 0.92);
        let mid = rng.uniform_range(0.38, 0.55);
        let lo = rng.uniform_range(0.18, 0.34);
        match self {
            Palette::Warm => [hi, mid, lo],
            Palette::Cool => [lo, mid, hi],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub frames: usize,
    pub fps: f64,
    pub palette: Palette,
    /// Scales the texture variation; 0 gives a uniform head colour.
    pub contrast: f64,
    /// Peak nod angle in degrees.
    pub nod_deg: f64,
    /// Peak jaw drop in scene units.
    pub jaw: f64,
    /// Displacement bound as a fraction of the head radius.
    pub max_displacement: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 60,
            fps: 25.0,
            palette: Palette::Warm,
            contrast: 1.0,
            nod_deg: 4.0,
            jaw: 0.07,
            max_displacement: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: Vec3,
    pub radius: f64,
}

/// Coloured Gaussian spot in the texture (eyes, mouth).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spot {
    pub center: Vec3,
    pub sigma: f64,
    pub color: [f64; 3],
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wave {
    pub freq: Vec3,
    pub phase: f64,
    /// Per-channel amplitude.
    pub amp: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motion {
    pub nod_rad: f64,
    pub nod_period: f64,
    pub pivot: Vec3,
    pub jaw: f64,
    pub jaw_period: f64,
    /// Height of the jaw hinge line.
    pub jaw_level: f64,
    pub bound: f64,
}

/// Ground-truth scene description; everything needed to re-render.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub radii: Vec3,
    pub exponent: f64,
    pub blobs: Vec<Blob>,
    pub base_color: [f64; 3],
    pub waves: Vec<Wave>,
    pub spots: Vec<Spot>,
    pub motion: Motion,
    pub frames: usize,
    pub fps: f64,
    pub palette: Palette,
}

pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    if config.frames < 1 || !(config.fps > 0.0) {
        return Err(Error::Config("scene needs frames >= 1 and fps > 0".into()));
    }
    if !(config.contrast >= 0.0) || !(config.max_displacement >= 0.0) {
        return Err(Error::Config("contrast and max_displacement must be non-negative".into()));
    }
    let mut rng = SeedRng::new(seed).fork("scene");
    let radii = [
        rng.uniform_range(0.68, 0.76),
        rng.uniform_range(0.88, 0.96),
        rng.uniform_range(0.74, 0.82),
    ];
    let front = radii[2];
    let blobs = vec![
        // Nose.
        Blob {
            center: [0.0, -0.02, front - 0.02],
            radius: rng.uniform_range(0.13, 0.17),
        },
        // Ears.
        Blob {
            center: [radii[0] - 0.04, 0.0, -0.05],
            radius: 0.16,
        },
        Blob {
            center: [-radii[0] + 0.04, 0.0, -0.05],
            radius: 0.16,
        },
    ];
    let base_color = config.palette.base_color(&mut rng);
    let waves = (0..4)
        .map(|_| Wave {
            freq: [
                rng.uniform_range(-2.5, 2.5),
                rng.uniform_range(-2.5, 2.5),
                rng.uniform_range(-2.5, 2.5),
            ],
            phase: rng.uniform_range(0.0, 2.0 * PI),
            amp: [0.0; 3].map(|_| config.contrast * rng.uniform_range(0.02, 0.07)),
        })
        .collect();
    let eye_y = radii[1] * 0.22;
    let eye_x = radii[0] * 0.38;
    let spot = |c: Vec3, sigma: f64, color: [f64; 3], strength: f64| Spot {
        center: c,
        sigma,
        color,
        strength: strength * config.contrast.min(1.0),
    };
    let mouth = match config.palette {
        Palette::Warm => [0.55, 0.12, 0.12],
        Palette::Cool => [0.12, 0.12, 0.55],
    };
    let spots = vec![
        spot([eye_x, eye_y, front * 0.9], 0.09, [0.1, 0.1, 0.12], 0.85),
        spot([-eye_x, eye_y, front * 0.9], 0.09, [0.1, 0.1, 0.12], 0.85),
        spot([0.0, -radii[1] * 0.45, front * 0.82], 0.12, mouth, 0.7),
        // Hair cap.
        spot([0.0, radii[1] * 1.05, -0.1], 0.45, [0.22, 0.17, 0.14], 0.8),
    ];
    let frames = config.frames as f64;
    let motion = Motion {
        nod_rad: config.nod_deg.to_radians(),
        nod_period: (frames * 0.75).max(2.0),
        pivot: [0.0, -radii[1] - 0.1, 0.0],
        jaw: config.jaw,
        jaw_period: (frames * 0.4).max(2.0),
        jaw_level: -radii[1] * 0.3,
        bound: config.max_displacement * radii[1],
    };
    Ok(SyntheticScene {
        radii,
        exponent: 2.6,
        blobs,
        base_color,
        waves,
        spots,
        motion,
        frames: config.frames,
        fps: config.fps,
        palette: config.palette,
    })
}

impl SyntheticScene {
    /// Radius of a sphere around the origin that contains the head at
    /// every frame.
    pub fn bounding_radius(&self) -> f64 {
        let shell = self.radii.iter().cloned().fold(0.0, f64::max);
        let blobs = self
            .blobs
            .iter()
            .map(|b| vec3::norm(b.center) + b.radius)
            .fold(0.0, f64::max);
        shell.max(blobs) + self.motion.bound + 1e-3
    }

    /// Level function of the canonical head: negative inside.
    pub fn canonical_level(&self, q: Vec3) -> f64 {
        let p = self.exponent;
        let s: f64 = (0..3).map(|d| (q[d] / self.radii[d]).abs().powf(p)).sum();
        let mut f = s.powf(1.0 / p) - 1.0;
        for b in &self.blobs {
            f = f.min(vec3::norm(vec3::sub(q, b.center)) / b.radius - 1.0);
        }
        f
    }

    /// Texture colour at a canonical point.
    pub fn albedo(&self, q: Vec3) -> [f64; 3] {
        let mut c = self.base_color;
        for w in &self.waves {
            let s = (vec3::dot(w.freq, q) + w.phase).sin();
            for k in 0..3 {
                c[k] += w.amp[k] * s;
            }
        }
        for s in &self.spots {
            let d2 = vec3::dot(vec3::sub(q, s.center), vec3::sub(q, s.center));
            let a = s.strength * (-d2 / (2.0 * s.sigma * s.sigma)).exp();
            for k in 0..3 {
                c[k] = (1.0 - a) * c[k] + a * s.color[k];
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// Motion amplitudes `(nod angle, jaw drop)` at a frame; both vanish at
    /// frame 0.
    pub fn amplitudes(&self, frame: usize) -> (f64, f64) {
        let m = &self.motion;
        let f = frame as f64;
        let nod = m.nod_rad * (PI * f / m.nod_period).sin().powi(2);
        let jaw = m.jaw * (PI * f / m.jaw_period).sin().powi(2);
        (nod, jaw)
    }

    /// Backward displacement `u_j(x)`: the canonical point seen at world
    /// position `x` in frame `j` is `x + u_j(x)`. Its length is clamped to
    /// the motion bound.
    pub fn displacement(&self, frame: usize, x: Vec3) -> Vec3 {
        let m = &self.motion;
        let (nod, jaw) = self.amplitudes(frame);
        // Undo a nod about the x axis through the pivot.
        let r = vec3::sub(x, m.pivot);
        let (s, c) = (-nod).sin_cos();
        let rotated = [r[0], c * r[1] - s * r[2], s * r[1] + c * r[2]];
        let mut u = vec3::sub(vec3::add(rotated, m.pivot), x);
        // Undo the jaw drop: points below the hinge line moved down.
        let below = 1.0 / (1.0 + ((x[1] - m.jaw_level) / 0.12).exp());
        let front = 1.0 / (1.0 + (-(x[2] + 0.1) / 0.2).exp());
        u[1] += jaw * below * front;
        let n = vec3::norm(u);
        if n > m.bound && n > 0.0 {
            u = vec3::scale(u, m.bound / n);
        }
        u
    }

    pub fn to_canonical(&self, frame: usize, x: Vec3) -> Vec3 {
        vec3::add(x, self.displacement(frame, x))
    }

    /// World position of canonical point `q` at `frame`, by fixed-point
    /// inversion of the backward warp.
    pub fn to_world(&self, frame: usize, q: Vec3) -> Result<Vec3> {
        let mut x = q;
        for _ in 0..200 {
            let next = vec3::sub(q, self.displacement(frame, x));
            let step = vec3::norm(vec3::sub(next, x));
            x = next;
            if step < 1e-13 {
                return Ok(x);
            }
        }
        let resid = vec3::norm(vec3::sub(self.to_canonical(frame, x), q));
        if resid < 1e-9 {
            Ok(x)
        } else {
            Err(Error::Aborted(format!("warp inversion did not converge (residual {resid:.2e})")))
        }
    }

    /// Level function of the deformed head at `frame`.
    pub fn level(&self, frame: usize, x: Vec3) -> f64 {
        self.canonical_level(self.to_canonical(frame, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let c = SceneConfig::default();
        assert_eq!(generate_scene(3, &c).unwrap(), generate_scene(3, &c).unwrap());
        assert_ne!(generate_scene(3, &c).unwrap(), generate_scene(4, &c).unwrap());
    }

    #[test]
    fn frame_zero_is_identity() {
        let s = generate_scene(1, &SceneConfig::default()).unwrap();
        let mut rng = SeedRng::new(2);
        for _ in 0..200 {
            let x = [0.0; 3].map(|_| rng.uniform_range(-1.5, 1.5));
            assert_eq!(s.displacement(0, x), [0.0; 3]);
        }
    }

    #[test]
    fn displacement_respects_bound() {
        let cfg = SceneConfig {
            nod_deg: 30.0,
            jaw: 0.5,
            ..SceneConfig::default()
        };
        let s = generate_scene(5, &cfg).unwrap();
        let mut rng = SeedRng::new(6);
        for f in 0..cfg.frames {
            for _ in 0..50 {
                let x = [0.0; 3].map(|_| rng.uniform_range(-1.6, 1.6));
                assert!(vec3::norm(s.displacement(f, x)) <= s.motion.bound + 1e-12);
            }
        }
    }

    #[test]
    fn warp_inversion_is_exact() {
        let s = generate_scene(7, &SceneConfig::default()).unwrap();
        let mut rng = SeedRng::new(8);
        for f in [5, 17, 31] {
            for _ in 0..50 {
                let q = [0.0; 3].map(|_| rng.uniform_range(-1.0, 1.0));
                let x = s.to_world(f, q).unwrap();
                assert!(vec3::norm(vec3::sub(s.to_canonical(f, x), q)) < 1e-10);
            }
        }
    }

    #[test]
    fn palettes_are_separated() {
        let mut rng = SeedRng::new(1);
        for _ in 0..100 {
            let w = Palette::Warm.base_color(&mut rng);
            let c = Palette::Cool.base_color(&mut rng);
            assert!(w[0] > w[2] && c[2] > c[0]);
        }
    }
}
