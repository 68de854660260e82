//! Multi-view video dataset: generation and on-disk layout.
//!
//! ```text
//! <root>/manifest.json      versioned index, scene parameters
//! <root>/cameras.json       camera file
//! <root>/<camera>/NNNN.png  one 8-bit image per frame
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{camera_ring, render_ground_truth, RigConfig};
use super::scene::{generate_scene, SceneConfig, SyntheticScene};
use crate::volren::camera_file::json_error;
use crate::volren::{CameraFile, Image};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CAMERA_FILE: &str = "cameras.json";

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewVideoDataset {
    pub cameras: CameraFile,
    /// `images[camera][frame]`.
    pub images: Vec<Vec<Image>>,
    pub fps: f64,
    pub scene: Option<SyntheticScene>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCamera {
    pub name: String,
    pub images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
    pub camera_file: String,
    pub cameras: Vec<ManifestCamera>,
    #[serde(default)]
    pub scene: Option<SyntheticScene>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| json_error("dataset manifest", &e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                what: "dataset manifest",
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        for c in &m.cameras {
            if c.images.len() != m.frames {
                return Err(Error::Format {
                    what: "dataset manifest",
                    detail: format!("camera `{}` lists {} of {} frames", c.name, c.images.len(), m.frames),
                });
            }
            if let Some(p) = c.images.iter().chain([&m.camera_file]).find(|p| !is_relative_safe(p)) {
                return Err(Error::Format {
                    what: "dataset manifest",
                    detail: format!("path `{p}` escapes the dataset directory"),
                });
            }
        }
        Ok(m)
    }
}

pub(crate) fn is_relative_safe(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.is_relative() && path.components().all(|c| matches!(c, std::path::Component::Normal(_)))
}

impl MultiViewVideoDataset {
    pub fn frames(&self) -> usize {
        self.images.first().map_or(0, |v| v.len())
    }

    pub fn camera_count(&self) -> usize {
        self.cameras.cameras.len()
    }

    pub fn size(&self) -> (usize, usize) {
        self.images
            .first()
            .and_then(|v| v.first())
            .map_or((0, 0), |i| (i.width, i.height))
    }

    pub fn frontal_camera(&self) -> Result<usize> {
        self.cameras
            .cameras
            .iter()
            .position(|c| c.frontal && !c.holdout)
            .ok_or_else(|| Error::invalid("dataset has no frontal camera"))
    }

    pub fn training_cameras(&self) -> Vec<usize> {
        (0..self.camera_count()).filter(|&i| !self.cameras.cameras[i].holdout).collect()
    }

    pub fn holdout_cameras(&self) -> Vec<usize> {
        (0..self.camera_count()).filter(|&i| self.cameras.cameras[i].holdout).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.cameras.validate()?;
        if self.images.len() != self.camera_count() {
            return Err(Error::invalid(format!(
                "{} image streams for {} cameras",
                self.images.len(),
                self.camera_count()
            )));
        }
        if self.training_cameras().len() < 2 {
            return Err(Error::invalid("dataset needs at least two training cameras"));
        }
        let frames = self.frames();
        if frames < 2 {
            return Err(Error::invalid("dataset needs at least two frames"));
        }
        let (w, h) = self.size();
        for (c, stream) in self.images.iter().enumerate() {
            if stream.len() != frames {
                return Err(Error::invalid(format!(
                    "camera {c} has {} frames, expected {frames}",
                    stream.len()
                )));
            }
            let cam = &self.cameras.cameras[c].camera;
            if (cam.width, cam.height) != (w, h) {
                return Err(Error::invalid(format!("camera {c} resolution differs from images")));
            }
            if let Some(j) = stream.iter().position(|i| (i.width, i.height) != (w, h)) {
                return Err(Error::invalid(format!("camera {c} frame {j} has inconsistent size")));
            }
        }
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let (w, h) = self.size();
        let mut cams = Vec::new();
        for (rec, stream) in self.cameras.cameras.iter().zip(&self.images) {
            let dir = root.join(&rec.name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut names = Vec::new();
            for (j, img) in stream.iter().enumerate() {
                let rel = format!("{}/{j:04}.png", rec.name);
                img.save_png(&root.join(&rel))?;
                names.push(rel);
            }
            cams.push(ManifestCamera {
                name: rec.name.clone(),
                images: names,
            });
        }
        self.cameras.save(&root.join(CAMERA_FILE))?;
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            width: w,
            height: h,
            frames: self.frames(),
            fps: self.fps,
            camera_file: CAMERA_FILE.into(),
            cameras: cams,
            scene: self.scene.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        let path = root.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m = DatasetManifest::parse(&text)?;
        let cameras = CameraFile::load(&root.join(&m.camera_file))?;
        if cameras.cameras.len() != m.cameras.len()
            || cameras.cameras.iter().zip(&m.cameras).any(|(a, b)| a.name != b.name)
        {
            return Err(Error::Format {
                what: "dataset manifest",
                detail: "camera list does not match the camera file".into(),
            });
        }
        let mut images = Vec::new();
        for c in &m.cameras {
            let mut stream = Vec::new();
            for rel in &c.images {
                let p: PathBuf = root.join(rel);
                let img = Image::load_png(&p)?;
                if (img.width, img.height) != (m.width, m.height) {
                    return Err(Error::Format {
                        what: "dataset",
                        detail: format!("{rel} is {}x{}, manifest says {}x{}", img.width, img.height, m.width, m.height),
                    });
                }
                stream.push(img);
            }
            images.push(stream);
        }
        let ds = MultiViewVideoDataset {
            cameras,
            images,
            fps: m.fps,
            scene: m.scene,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Render a full synthetic dataset. Images are quantised to 8 bits so the
/// on-disk round trip is exact.
pub fn build_dataset(seed: u64, scene_cfg: &SceneConfig, rig: &RigConfig) -> Result<MultiViewVideoDataset> {
    let scene = generate_scene(seed, scene_cfg)?;
    let cameras = camera_ring(rig)?;
    let mut images = Vec::new();
    for rec in &cameras.cameras {
        let mut stream = Vec::new();
        for j in 0..scene.frames {
            let img = render_ground_truth(&scene, &rec.camera, j)?;
            stream.push(Image::from_rgb8(img.width, img.height, &img.to_rgb8())?);
        }
        images.push(stream);
    }
    let ds = MultiViewVideoDataset {
        cameras,
        images,
        fps: scene.fps,
        scene: Some(scene),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MultiViewVideoDataset {
        build_dataset(
            1,
            &SceneConfig {
                frames: 3,
                ..SceneConfig::default()
            },
            &RigConfig {
                cameras: 3,
                holdout_cameras: 1,
                width: 12,
                height: 10,
                ..RigConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn write_read_round_trip() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = MultiViewVideoDataset::read(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_manifest_reports_position() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replacen("\"frames\":", "\"frames\": x", 1)).unwrap();
        match MultiViewVideoDataset::read(dir.path()) {
            Err(Error::Parse { position, .. }) => assert!(position.contains("line")),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, &text[..text.len() / 3]).unwrap();
        assert!(matches!(MultiViewVideoDataset::read(dir.path()), Err(Error::Truncated { .. })));
        std::fs::write(&p, text.replacen("\"version\": 1", "\"version\": 2", 1)).unwrap();
        assert!(matches!(MultiViewVideoDataset::read(dir.path()), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn validation_rejects_bad_datasets() {
        let mut ds = tiny();
        ds.images[1].pop();
        assert!(ds.validate().is_err());
        let mut ds = tiny();
        ds.images[0][1] = Image::filled(3, 3, [1.0; 3]);
        assert!(ds.validate().is_err());
        let mut ds = tiny();
        ds.cameras.cameras[0].camera.rotation[0][0] = 3.0;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn unsafe_paths_rejected() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let bad = text.replacen("cam00/0000.png", "../0000.png", 1);
        assert!(DatasetManifest::parse(&bad).is_err());
    }
}
