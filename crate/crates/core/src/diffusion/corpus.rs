//! Tagged image corpora with a versioned on-disk index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::autoencoder::AutoencoderPair;
use super::concept::ConceptBook;
use super::train::TrainSample;
use crate::diffmath::SeedRng;
use crate::scenegen::dataset::is_relative_safe;
use crate::scenegen::{render_class_sample, Palette};
use crate::volren::camera_file::json_error;
use crate::volren::Image;
use crate::{Error, Result};

pub const CORPUS_VERSION: u32 = 1;
pub const CORPUS_FILE: &str = "corpus.json";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub image: Image,
    /// Condition tokens; the first is the class noun.
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub size: usize,
    pub items: Vec<CorpusItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub path: String,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub size: usize,
    pub items: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: CorpusManifest = serde_json::from_str(text).map_err(|e| json_error("corpus manifest", &e))?;
        if m.version != CORPUS_VERSION {
            return Err(Error::Version {
                what: "corpus manifest",
                found: m.version,
                expected: CORPUS_VERSION,
            });
        }
        if m.size == 0 || m.items.is_empty() {
            return Err(Error::Format {
                what: "corpus manifest",
                detail: "empty corpus".into(),
            });
        }
        for (i, e) in m.items.iter().enumerate() {
            if !is_relative_safe(&e.path) {
                return Err(Error::Format {
                    what: "corpus manifest",
                    detail: format!("item {i}: unsafe path `{}`", e.path),
                });
            }
            if e.tags.is_empty() || e.tags.iter().any(|t| t.is_empty()) {
                return Err(Error::Format {
                    what: "corpus manifest",
                    detail: format!("item {i}: needs at least one non-empty tag"),
                });
            }
        }
        Ok(m)
    }
}

impl Corpus {
    pub fn write(&self, root: &Path) -> Result<()> {
        let dir = root.join("images");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut items = Vec::new();
        for (i, it) in self.items.iter().enumerate() {
            let rel = format!("images/{i:05}.png");
            it.image.save_png(&root.join(&rel))?;
            items.push(CorpusEntry {
                path: rel,
                tags: it.tags.clone(),
            });
        }
        let m = CorpusManifest {
            version: CORPUS_VERSION,
            size: self.size,
            items,
        };
        let path = root.join(CORPUS_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&m).expect("manifest serialises"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(CORPUS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m = CorpusManifest::parse(&text)?;
        let mut items = Vec::with_capacity(m.items.len());
        for e in m.items {
            let image = Image::load_png(&root.join(&e.path))?;
            if image.width != m.size || image.height != m.size {
                return Err(Error::Format {
                    what: "corpus",
                    detail: format!("{} is {}x{}, expected {}", e.path, image.width, image.height, m.size),
                });
            }
            items.push(CorpusItem { image, tags: e.tags });
        }
        Ok(Self { size: m.size, items })
    }

    /// Model-space training samples conditioned on each item's tags.
    pub fn train_samples(&self, ae: &AutoencoderPair, book: &ConceptBook) -> Result<Vec<TrainSample>> {
        self.items
            .iter()
            .map(|it| {
                let cond = match it.tags.as_slice() {
                    [class] => book.class(class)?,
                    [class, id] => book.identifier(id, class)?,
                    _ => return Err(Error::invalid(format!("unsupported tag list {:?}", it.tags))),
                };
                Ok(TrainSample {
                    x: ae.encode(&it.image)?,
                    cond,
                })
            })
            .collect()
    }

    pub fn images(&self) -> Vec<Image> {
        self.items.iter().map(|i| i.image.clone()).collect()
    }
}

/// `per_class` quantised renders of each palette class, interleaved.
pub fn build_class_corpus(per_class: usize, size: usize, seed: u64) -> Result<Corpus> {
    let mut rng = SeedRng::new(seed).fork("corpus");
    let mut items = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        for p in [Palette::Warm, Palette::Cool] {
            let img = render_class_sample(p, &mut rng, size)?;
            items.push(CorpusItem {
                image: Image::from_rgb8(size, size, &img.to_rgb8())?,
                tags: vec![p.name().to_string()],
            });
        }
    }
    Ok(Corpus { size, items })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_round_trips_through_disk() {
        let c = build_class_corpus(2, 8, 1).unwrap();
        assert_eq!(c.items.len(), 4);
        assert_eq!(c.items[0].tags, vec!["warm"]);
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        assert_eq!(Corpus::read(dir.path()).unwrap(), c);
    }

    #[test]
    fn manifest_rejections() {
        let ok = r#"{"version":1,"size":8,"items":[{"path":"a.png","tags":["warm"]}]}"#;
        assert!(CorpusManifest::parse(ok).is_ok());
        for bad in [
            r#"{"version":2,"size":8,"items":[{"path":"a.png","tags":["warm"]}]}"#,
            r#"{"version":1,"size":8,"items":[]}"#,
            r#"{"version":1,"size":8,"items":[{"path":"../a.png","tags":["warm"]}]}"#,
            r#"{"version":1,"size":8,"items":[{"path":"/a.png","tags":["warm"]}]}"#,
            r#"{"version":1,"size":8,"items":[{"path":"a.png","tags":[]}]}"#,
            r#"{"version":1,"size":8,"items":[{"path":"a.png","tags":["warm"]}],"x":1}"#,
            r#"{"version":1,"size":8,"items":[{"path":"a.png","#,
        ] {
            assert!(CorpusManifest::parse(bad).is_err(), "{bad}");
        }
        assert!(matches!(CorpusManifest::parse(r#"{"version":1,"#), Err(Error::Truncated { .. })));
    }
}
