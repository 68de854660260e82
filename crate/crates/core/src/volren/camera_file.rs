//! Versioned JSON camera rig file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Camera;
use crate::{Error, Result};

pub const CAMERA_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub name: String,
    #[serde(default)]
    pub frontal: bool,
    /// Held out from reconstruction training, used for evaluation only.
    #[serde(default)]
    pub holdout: bool,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub version: u32,
    pub cameras: Vec<CameraRecord>,
}

impl CameraFile {
    pub fn new(cameras: Vec<CameraRecord>) -> Self {
        Self {
            version: CAMERA_FILE_VERSION,
            cameras,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CAMERA_FILE_VERSION {
            return Err(Error::Version {
                what: "camera file",
                found: self.version,
                expected: CAMERA_FILE_VERSION,
            });
        }
        let mut names = std::collections::HashSet::new();
        for rec in &self.cameras {
            if !names.insert(rec.name.as_str()) {
                return Err(Error::invalid(format!("duplicate camera name `{}`", rec.name)));
            }
            rec.camera
                .validate()
                .map_err(|e| Error::invalid(format!("camera `{}`: {e}", rec.name)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: CameraFile = serde_json::from_str(text).map_err(|e| json_error("camera file", &e))?;
        file.validate()?;
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("camera file serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn json_error(what: &'static str, e: &serde_json::Error) -> Error {
    if e.is_eof() {
        return Error::Truncated {
            what,
            detail: format!("line {}, column {}", e.line(), e.column()),
        };
    }
    Error::Parse {
        what,
        position: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    }
}
