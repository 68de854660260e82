//! Replays the checked-in fuzz corpus through the same entry points the
//! fuzz targets call. `seed_valid_*` files must decode; everything else
//! only has to return without panicking.

use std::path::{Path, PathBuf};

use vtedit::avatar::DynamicAvatar;
use vtedit::diffmath::container;
use vtedit::diffusion::{AutoencoderPair, ConceptBook, CorpusManifest, Denoiser, TrainLog};
use vtedit::keyframes::KeyframeManifest;
use vtedit::pipeline::PipelineConfig;
use vtedit::scenegen::DatasetManifest;
use vtedit::volren::{CameraFile, Image};
use vtedit::vtsds::EditLog;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("seed_"))
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(out.iter().any(|(p, _)| is_valid(p)), "{target}: no valid seed");
    assert!(out.iter().any(|(p, _)| !is_valid(p)), "{target}: no malformed seed");
    out
}

fn is_valid(p: &Path) -> bool {
    p.file_name().unwrap().to_string_lossy().starts_with("seed_valid")
}

/// Runs `f` on every seed; valid seeds must succeed and malformed ones must fail.
fn replay<E: std::fmt::Debug>(target: &str, f: impl Fn(&[u8]) -> Result<(), E>) {
    for (path, bytes) in corpus(target) {
        let r = f(&bytes);
        if is_valid(&path) {
            r.unwrap_or_else(|e| panic!("{}: {e:?}", path.display()));
        } else {
            assert!(r.is_err(), "{} decoded", path.display());
        }
    }
}

fn text(bytes: &[u8]) -> Result<&str, String> {
    std::str::from_utf8(bytes).map_err(|e| e.to_string())
}

#[test]
fn container_seeds() {
    replay("container", |b| container::decode(b).map(drop));
}

#[test]
fn camera_file_seeds() {
    replay("camera_file", |b| CameraFile::parse(text(b)?).map(drop).map_err(|e| e.to_string()));
}

#[test]
fn dataset_manifest_seeds() {
    replay("dataset_manifest", |b| DatasetManifest::parse(text(b)?).map(drop).map_err(|e| e.to_string()));
}

#[test]
fn corpus_manifest_seeds() {
    replay("corpus_manifest", |b| CorpusManifest::parse(text(b)?).map(drop).map_err(|e| e.to_string()));
}

#[test]
fn keyframe_manifest_seeds() {
    replay("keyframe_manifest", |b| KeyframeManifest::parse(text(b)?).map(drop).map_err(|e| e.to_string()));
}

#[test]
fn image_seeds() {
    replay("float_image", |b| Image::decode_float(b).map(drop));
    replay("png_image", |b| Image::decode_png(b).map(drop));
}

#[test]
fn log_seeds() {
    replay("train_log", |b| TrainLog::parse_csv(text(b)?).map(drop).map_err(|e| e.to_string()));
    replay("edit_log", |b| EditLog::parse_csv(text(b)?).map(drop).map_err(|e| e.to_string()));
}

#[test]
fn pipeline_config_seeds() {
    replay("pipeline_config", |b| PipelineConfig::parse(text(b)?).map(drop).map_err(|e| e.to_string()));
}

#[test]
fn checkpoint_seeds() {
    // Each valid seed is one kind of checkpoint; the target feeds it to all four.
    replay("checkpoints", |b| {
        let ok = ConceptBook::from_bytes(b).is_ok() as u8
            + Denoiser::from_bytes(b).is_ok() as u8
            + AutoencoderPair::from_bytes(b).is_ok() as u8
            + DynamicAvatar::from_bytes(b).is_ok() as u8;
        match ok {
            0 => Err("no decoder accepted the bytes"),
            1 => Ok(()),
            _ => panic!("checkpoint accepted by {ok} decoders"),
        }
    });
}
