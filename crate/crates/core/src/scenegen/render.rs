//! Analytic ground-truth rendering of a [`SyntheticScene`].

use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use crate::volren::vec3::{self, Vec3};
use crate::volren::{Camera, CameraFile, CameraRecord, Image};
use crate::{Error, Result};

pub const BACKGROUND: [f64; 3] = [1.0; 3];

/// First surface hit along a ray: depth and canonical point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub world: Vec3,
    pub canonical: Vec3,
}

/// March `origin + t dir` through the deformed head at `frame`.
pub fn trace(scene: &SyntheticScene, frame: usize, origin: Vec3, dir: Vec3) -> Option<Hit> {
    let r = scene.bounding_radius();
    // Ray / bounding sphere interval.
    let b = vec3::dot(origin, dir);
    let c = vec3::dot(origin, origin) - r * r;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t0, t1) = ((-b - sq).max(0.0), -b + sq);
    if t1 <= t0 {
        return None;
    }
    let step = 0.01;
    let mut t_prev = t0;
    let mut f_prev = scene.level(frame, vec3::at(origin, dir, t0));
    if f_prev < 0.0 {
        return Some(hit(scene, frame, origin, dir, t0));
    }
    let mut t = t0;
    while t < t1 {
        t = (t + step).min(t1);
        let f = scene.level(frame, vec3::at(origin, dir, t));
        if f < 0.0 {
            // Bisect the sign change.
            let (mut lo, mut hi) = (t_prev, t);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if scene.level(frame, vec3::at(origin, dir, mid)) < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(hit(scene, frame, origin, dir, hi));
        }
        t_prev = t;
        f_prev = f;
    }
    let _ = f_prev;
    None
}

fn hit(scene: &SyntheticScene, frame: usize, origin: Vec3, dir: Vec3, t: f64) -> Hit {
    let world = vec3::at(origin, dir, t);
    Hit {
        t,
        world,
        canonical: scene.to_canonical(frame, world),
    }
}

/// Albedo-only render over a white background at the camera's resolution.
pub fn render_ground_truth(scene: &SyntheticScene, camera: &Camera, frame: usize) -> Result<Image> {
    if frame >= scene.frames {
        return Err(Error::invalid(format!("frame {frame} out of range ({} frames)", scene.frames)));
    }
    camera.validate()?;
    let origin = camera.center();
    let mut img = Image::filled(camera.width, camera.height, BACKGROUND);
    for v in 0..camera.height {
        for u in 0..camera.width {
            let dir = camera.direction(u as f64, v as f64);
            if let Some(h) = trace(scene, frame, origin, dir) {
                img.set_pixel(u, v, scene.albedo(h.canonical));
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    /// Training cameras on the ring; camera 0 is frontal.
    pub cameras: usize,
    /// Extra evaluation cameras placed between ring cameras.
    pub holdout_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub distance: f64,
    pub fov_deg: f64,
    /// Elevation of alternate ring cameras, in degrees.
    pub elevation_deg: f64,
    /// Azimuthal coverage. 360 is a full ring starting at the front; smaller
    /// arcs are centred on the front, like a frontal capture rig.
    pub arc_deg: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            cameras: 24,
            holdout_cameras: 2,
            width: 64,
            height: 64,
            distance: 4.0,
            fov_deg: 38.0,
            elevation_deg: 12.0,
            arc_deg: 360.0,
        }
    }
}

impl RigConfig {
    fn full_ring(&self) -> bool {
        self.arc_deg >= 360.0
    }

    /// Azimuths of the training cameras, in radians.
    pub fn azimuths(&self) -> Vec<f64> {
        let n = self.cameras;
        if self.full_ring() {
            let step = 2.0 * std::f64::consts::PI / n as f64;
            (0..n).map(|k| k as f64 * step).collect()
        } else {
            let arc = self.arc_deg.to_radians();
            let step = arc / (n - 1) as f64;
            (0..n).map(|k| -0.5 * arc + k as f64 * step).collect()
        }
    }

    /// Azimuths of the holdout cameras: midpoints between neighbouring ring
    /// cameras, those nearest the front first.
    pub fn holdout_azimuths(&self) -> Vec<f64> {
        let az = self.azimuths();
        let n = az.len();
        let mut mids: Vec<f64> = if self.full_ring() {
            let step = 2.0 * std::f64::consts::PI / n as f64;
            // Wrap into (-pi, pi] so "nearest the front" is well defined.
            (0..n)
                .map(|k| {
                    let m = (k as f64 + 0.5) * step;
                    if m > std::f64::consts::PI { m - 2.0 * std::f64::consts::PI } else { m }
                })
                .collect()
        } else {
            az.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
        };
        mids.sort_by(|a, b| {
            let ka = ((a.abs() * 1e9).round() as i64, *a < 0.0);
            let kb = ((b.abs() * 1e9).round() as i64, *b < 0.0);
            ka.cmp(&kb)
        });
        mids.truncate(self.holdout_cameras);
        mids
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras < 2 || self.width < 2 || self.height < 2 {
            return Err(Error::Config("rig needs >= 2 cameras and images of at least 2x2".into()));
        }
        if !(self.distance > 0.0 && self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config("rig distance and field of view must be positive".into()));
        }
        if !(self.arc_deg > 0.0 && self.arc_deg <= 360.0) {
            return Err(Error::Config(format!("rig arc must be in (0, 360], got {}", self.arc_deg)));
        }
        let slots = if self.full_ring() { self.cameras } else { self.cameras - 1 };
        if self.holdout_cameras > slots {
            return Err(Error::Config(format!(
                "{} holdout cameras requested but only {slots} gaps between ring cameras",
                self.holdout_cameras
            )));
        }
        Ok(())
    }
}

fn ring_camera(cfg: &RigConfig, azimuth: f64, elevation: f64) -> Result<Camera> {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    let eye = vec3::scale([sa * ce, se, ca * ce], cfg.distance);
    Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], cfg.fov_deg, cfg.width, cfg.height)
}

/// Ring of cameras around the head. Camera 0 faces the front (+z);
/// hold-out cameras sit at azimuths midway between training cameras on
/// the frontal half.
pub fn camera_ring(cfg: &RigConfig) -> Result<CameraFile> {
    cfg.validate()?;
    let elev = cfg.elevation_deg.to_radians();
    let az = cfg.azimuths();
    let front = (0..az.len())
        .min_by(|&a, &b| az[a].abs().total_cmp(&az[b].abs()))
        .unwrap_or(0);
    let mut recs = Vec::new();
    for (k, &a) in az.iter().enumerate() {
        let e = if k % 2 == 1 { elev } else { 0.0 };
        recs.push(CameraRecord {
            name: format!("cam{k:02}"),
            frontal: k == front,
            holdout: false,
            camera: ring_camera(cfg, a, e)?,
        });
    }
    for (h, a) in cfg.holdout_azimuths().into_iter().enumerate() {
        recs.push(CameraRecord {
            name: format!("eval{h:02}"),
            frontal: false,
            holdout: true,
            camera: ring_camera(cfg, a, 0.5 * elev)?,
        });
    }
    Ok(CameraFile::new(recs))
}

#[cfg(test)]
mod tests {
    use super::super::scene::{generate_scene, SceneConfig};
    use super::*;

    fn small_rig() -> RigConfig {
        RigConfig {
            cameras: 4,
            holdout_cameras: 1,
            width: 24,
            height: 24,
            ..RigConfig::default()
        }
    }

    #[test]
    fn ring_layout() {
        let f = camera_ring(&RigConfig::default()).unwrap();
        assert_eq!(f.cameras.len(), 26);
        assert_eq!(f.cameras.iter().filter(|c| c.frontal).count(), 1);
        assert_eq!(f.cameras.iter().filter(|c| c.holdout).count(), 2);
        let front = &f.cameras[0].camera;
        assert!(vec3::norm(vec3::sub(front.forward(), [0.0, 0.0, -1.0])) < 1e-12);
    }

    #[test]
    fn arc_rig_is_centred_with_holdouts_in_gaps() {
        let rig = RigConfig {
            cameras: 4,
            holdout_cameras: 3,
            arc_deg: 90.0,
            ..RigConfig::default()
        };
        let az: Vec<f64> = rig.azimuths().iter().map(|a| a.to_degrees()).collect();
        for (a, e) in az.iter().zip([-45.0, -15.0, 15.0, 45.0]) {
            assert!((a - e).abs() < 1e-9);
        }
        let h: Vec<f64> = rig.holdout_azimuths().iter().map(|a| a.to_degrees()).collect();
        for (a, e) in h.iter().zip([0.0, 30.0, -30.0]) {
            assert!((a - e).abs() < 1e-9, "{h:?}");
        }
        let f = camera_ring(&rig).unwrap();
        assert_eq!(f.cameras.iter().filter(|c| c.frontal).count(), 1);
        assert!(camera_ring(&RigConfig { holdout_cameras: 4, ..rig }).is_err());
    }

    #[test]
    fn full_ring_holdouts_flank_the_front() {
        let h: Vec<f64> = RigConfig::default().holdout_azimuths().iter().map(|a| a.to_degrees()).collect();
        assert!((h[0] - 7.5).abs() < 1e-9 && (h[1] + 7.5).abs() < 1e-9, "{h:?}");
    }

    #[test]
    fn front_and_back_views_differ() {
        let scene = generate_scene(1, &SceneConfig::default()).unwrap();
        let rig = camera_ring(&small_rig()).unwrap();
        let front = render_ground_truth(&scene, &rig.cameras[0].camera, 0).unwrap();
        let back = render_ground_truth(&scene, &rig.cameras[2].camera, 0).unwrap();
        assert!(front.mean_abs_diff(&back).unwrap() > 0.01);
        // Some head and some background in view.
        let fg = front.pixels().filter(|p| *p != BACKGROUND).count();
        assert!(fg > 50 && fg < 24 * 24);
    }

    #[test]
    fn silhouette_centroid_matches_projection() {
        let mut scene = generate_scene(2, &SceneConfig::default()).unwrap();
        // A small ball off-centre, nothing else.
        let c = [0.3, -0.2, 0.25];
        scene.radii = [1e-3; 3];
        scene.blobs = vec![super::super::scene::Blob { center: c, radius: 0.12 }];
        let rig = camera_ring(&RigConfig {
            cameras: 6,
            width: 96,
            height: 96,
            ..RigConfig::default()
        })
        .unwrap();
        for rec in &rig.cameras[..2] {
            let img = render_ground_truth(&scene, &rec.camera, 0).unwrap();
            let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
            for v in 0..img.height {
                for u in 0..img.width {
                    if img.pixel(u, v) != BACKGROUND {
                        su += u as f64;
                        sv += v as f64;
                        n += 1.0;
                    }
                }
            }
            let (pu, pv, _) = rec.camera.project(c).unwrap();
            assert!(n > 10.0);
            assert!((su / n - pu).abs() < 1.0 && (sv / n - pv).abs() < 1.0, "{} {}", su / n - pu, sv / n - pv);
        }
    }

    #[test]
    fn zero_contrast_gives_uniform_head() {
        let cfg = SceneConfig {
            contrast: 0.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(3, &cfg).unwrap();
        let rig = camera_ring(&small_rig()).unwrap();
        let img = render_ground_truth(&scene, &rig.cameras[0].camera, 0).unwrap();
        let fg: Vec<_> = img.pixels().filter(|p| *p != BACKGROUND).collect();
        assert!(!fg.is_empty());
        assert!(fg.iter().all(|p| *p == scene.base_color));
    }

    #[test]
    fn projected_correspondence_hits_same_material_point() {
        let scene = generate_scene(4, &SceneConfig::default()).unwrap();
        let cam = Camera::look_at([0.0, 0.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0], 38.0, 64, 64).unwrap();
        let o = cam.center();
        // A visible point at frame 0, followed to frame 9.
        let h0 = trace(&scene, 0, o, cam.direction(30.0, 36.0)).unwrap();
        let x9 = scene.to_world(9, h0.canonical).unwrap();
        let dir = vec3::normalize(vec3::sub(x9, o));
        let h9 = trace(&scene, 9, o, dir).unwrap();
        assert!(vec3::norm(vec3::sub(h9.canonical, h0.canonical)) < 1e-6);
    }
}
