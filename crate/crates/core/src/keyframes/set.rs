//! The fine-tuning keyframe set, its identifiers and its on-disk index.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::select::{select_keyframes, DeviationNorm, Exclusion};
use crate::diffmath::SeedRng;
use crate::diffusion::{validate_identifier, Concept, ConceptBook, TokenKind, IDENTIFIER_LEN};
use crate::scenegen::dataset::is_relative_safe;
use crate::scenegen::MultiViewVideoDataset;
use crate::volren::camera_file::json_error;
use crate::volren::Image;
use crate::{Error, Result};

pub const KEYFRAME_MANIFEST_FILE: &str = "keyframes.json";
pub const KEYFRAME_MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframeConfig {
    pub n_temporal: usize,
    /// `None`: a frame window of `round(fps / 2)`.
    pub exclusion: Option<Exclusion>,
    pub norm: DeviationNorm,
    pub class: String,
    pub identifier_init: f64,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            n_temporal: 6,
            exclusion: None,
            norm: DeviationNorm::L2,
            class: "warm".into(),
            identifier_init: 1.0,
        }
    }
}

impl KeyframeConfig {
    pub fn exclusion_for(&self, fps: f64) -> Exclusion {
        self.exclusion.unwrap_or(Exclusion::Window((fps / 2.0).round().max(0.0) as usize))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub camera: usize,
    pub frame: usize,
    /// Empty until [`assign_identifiers`] runs.
    pub identifier: String,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeSet {
    pub entries: Vec<Keyframe>,
    pub frontal_camera: usize,
    pub class: String,
}

/// Temporal keyframes for the frontal camera. Frame 0 is already covered by
/// the multi-view entries, so candidates are frames `1..m` and the result is
/// in dataset frame indices.
pub fn select_temporal_frames(embeddings: &[Vec<f64>], fps: f64, cfg: &KeyframeConfig) -> Result<Vec<usize>> {
    if embeddings.len() < 2 {
        return Err(Error::invalid("temporal keyframes need at least two frames"));
    }
    let picked = select_keyframes(&embeddings[1..], cfg.n_temporal, cfg.exclusion_for(fps), cfg.norm)?;
    Ok(picked.into_iter().map(|j| j + 1).collect())
}

/// Every training camera at frame 0 plus the frontal camera at each of `frames`.
pub fn build_keyframe_set(dataset: &MultiViewVideoDataset, frames: &[usize], class: &str) -> Result<KeyframeSet> {
    let frontal = dataset.frontal_camera()?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    let requests = dataset
        .training_cameras()
        .into_iter()
        .map(|c| (c, 0))
        .chain(frames.iter().map(|&f| (frontal, f)));
    for (camera, frame) in requests {
        if frame >= dataset.frames() {
            return Err(Error::invalid(format!("keyframe {frame} is past the last frame {}", dataset.frames() - 1)));
        }
        if !seen.insert((camera, frame)) {
            return Err(Error::invalid(format!("duplicate keyframe (camera {camera}, frame {frame})")));
        }
        entries.push(Keyframe {
            camera,
            frame,
            identifier: String::new(),
            image: dataset.images[camera][frame].clone(),
        });
    }
    Ok(KeyframeSet {
        entries,
        frontal_camera: frontal,
        class: class.to_string(),
    })
}

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

fn random_token(rng: &mut SeedRng) -> String {
    (0..IDENTIFIER_LEN).map(|_| ALPHABET[rng.below(ALPHABET.len())] as char).collect()
}

/// Give every entry a fresh identifier and register its embedding in `book`.
/// Tokens that collide with anything already in the book are re-drawn.
pub fn assign_identifiers(set: &mut KeyframeSet, book: &mut ConceptBook, rng: &mut SeedRng, init_scale: f64) -> Result<()> {
    let mut tokens = rng.fork("identifier.tokens");
    let mut init = rng.fork("identifier.init");
    for e in &mut set.entries {
        let id = loop {
            let t = random_token(&mut tokens);
            if book.entry(&t).is_none() {
                break t;
            }
        };
        book.add(&id, TokenKind::Identifier, &mut init, init_scale)?;
        e.identifier = id;
    }
    Ok(())
}

impl KeyframeSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn concepts(&self) -> Result<Vec<Concept>> {
        self.entries
            .iter()
            .map(|e| {
                validate_identifier(&e.identifier)?;
                Ok(Concept {
                    identifier: e.identifier.clone(),
                    image: e.image.clone(),
                })
            })
            .collect()
    }

    pub fn find(&self, identifier: &str) -> Option<&Keyframe> {
        self.entries.iter().find(|e| e.identifier == identifier)
    }

    pub fn validate(&self) -> Result<()> {
        let mut pairs = HashSet::new();
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !pairs.insert((e.camera, e.frame)) {
                return Err(Error::invalid(format!("duplicate keyframe (camera {}, frame {})", e.camera, e.frame)));
            }
            if e.frame != 0 && e.camera != self.frontal_camera {
                return Err(Error::invalid(format!(
                    "keyframe (camera {}, frame {}) is off the frontal camera",
                    e.camera, e.frame
                )));
            }
            if !e.identifier.is_empty() {
                validate_identifier(&e.identifier)?;
                if !ids.insert(e.identifier.as_str()) {
                    return Err(Error::invalid(format!("identifier `{}` used twice", e.identifier)));
                }
            }
        }
        if !pairs.contains(&(self.frontal_camera, 0)) {
            return Err(Error::invalid("keyframe set lacks the frontal view of frame 0"));
        }
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        self.validate()?;
        let dir = root.join("keyframes");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut items = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let rel = format!("keyframes/{i:03}.png");
            e.image.save_png(&root.join(&rel))?;
            items.push(KeyframeEntry {
                camera: e.camera,
                frame: e.frame,
                identifier: e.identifier.clone(),
                image: rel,
            });
        }
        let m = KeyframeManifest {
            version: KEYFRAME_MANIFEST_VERSION,
            frontal_camera: self.frontal_camera,
            class: self.class.clone(),
            entries: items,
        };
        let path = root.join(KEYFRAME_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&m).expect("keyframe manifest serialises");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(KEYFRAME_MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m = KeyframeManifest::parse(&text)?;
        let entries = m
            .entries
            .into_iter()
            .map(|e| {
                Ok(Keyframe {
                    camera: e.camera,
                    frame: e.frame,
                    identifier: e.identifier,
                    image: Image::load_png(&root.join(&e.image))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let set = KeyframeSet {
            entries,
            frontal_camera: m.frontal_camera,
            class: m.class,
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeEntry {
    pub camera: usize,
    pub frame: usize,
    pub identifier: String,
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeManifest {
    pub version: u32,
    pub frontal_camera: usize,
    pub class: String,
    pub entries: Vec<KeyframeEntry>,
}

impl KeyframeManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: KeyframeManifest = serde_json::from_str(text).map_err(|e| json_error("keyframe manifest", &e))?;
        if m.version != KEYFRAME_MANIFEST_VERSION {
            return Err(Error::Version {
                what: "keyframe manifest",
                found: m.version,
                expected: KEYFRAME_MANIFEST_VERSION,
            });
        }
        let bad = |detail: String| Error::Format {
            what: "keyframe manifest",
            detail,
        };
        if m.entries.is_empty() {
            return Err(bad("no entries".into()));
        }
        if m.class.is_empty() {
            return Err(bad("empty class noun".into()));
        }
        let mut ids = HashSet::new();
        let mut pairs = HashSet::new();
        for e in &m.entries {
            if !is_relative_safe(&e.image) {
                return Err(bad(format!("path `{}` escapes the keyframe directory", e.image)));
            }
            if !pairs.insert((e.camera, e.frame)) {
                return Err(bad(format!("duplicate (camera {}, frame {})", e.camera, e.frame)));
            }
            if !e.identifier.is_empty() {
                validate_identifier(&e.identifier).map_err(|err| bad(err.to_string()))?;
                if !ids.insert(e.identifier.as_str()) {
                    return Err(bad(format!("identifier `{}` repeated", e.identifier)));
                }
            }
        }
        Ok(m)
    }
}
