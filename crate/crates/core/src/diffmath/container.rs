//! Versioned binary container for [`ParamVector`] checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  b"VTPV"
//! version    u32      = 1
//! dtype      u8       0 = f64, 1 = f32
//! meta_len   u32      followed by UTF-8 metadata (JSON config manifest)
//! n_groups   u32
//! per group: name_len u16, name (UTF-8), ndim u8, dims u32 * ndim
//! payload    every group's scalars in declaration order
//! ```

use std::path::Path;

use super::ParamVector;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VTPV";
pub const VERSION: u32 = 1;

const WHAT: &str = "parameter container";
const MAX_NDIM: u8 = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// A decoded checkpoint: parameters plus the free-form metadata string.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub meta: String,
}

pub fn encode(params: &ParamVector, meta: &str, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.tag());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.groups().len() as u32).to_le_bytes());
    for g in params.groups() {
        out.extend_from_slice(&(g.name.len() as u16).to_le_bytes());
        out.extend_from_slice(g.name.as_bytes());
        out.push(g.shape.len() as u8);
        for &d in &g.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for &v in params.values() {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                what: WHAT,
                detail: format!("{field} at byte {} needs {n} bytes", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn utf8(&mut self, n: usize, field: &str) -> Result<&'a str> {
        let at = self.pos;
        std::str::from_utf8(self.take(n, field)?).map_err(|_| Error::Format {
            what: WHAT,
            detail: format!("{field} at byte {at} is not UTF-8"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            what: WHAT,
            detail: "bad magic bytes".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            what: WHAT,
            found: version,
            expected: VERSION,
        });
    }
    let dtype = match r.u8("dtype")? {
        0 => Dtype::F64,
        1 => Dtype::F32,
        other => {
            return Err(Error::Format {
                what: WHAT,
                detail: format!("unknown dtype tag {other}"),
            })
        }
    };
    let meta_len = r.u32("metadata length")? as usize;
    let meta = r.utf8(meta_len, "metadata")?.to_string();
    let n_groups = r.u32("group count")? as usize;
    let mut layout = Vec::new();
    let mut total: usize = 0;
    for i in 0..n_groups {
        let name_len = r.u16("group name length")? as usize;
        let name = r.utf8(name_len, "group name")?.to_string();
        let ndim = r.u8("group rank")?;
        if ndim > MAX_NDIM {
            return Err(Error::Format {
                what: WHAT,
                detail: format!("group {i} `{name}` has rank {ndim} > {MAX_NDIM}"),
            });
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut len: usize = 1;
        for _ in 0..ndim {
            let d = r.u32("group dimension")? as usize;
            len = len.checked_mul(d).ok_or_else(|| Error::Format {
                what: WHAT,
                detail: format!("group `{name}` size overflows"),
            })?;
            shape.push(d);
        }
        total = total.checked_add(len).ok_or_else(|| Error::Format {
            what: WHAT,
            detail: "total size overflows".into(),
        })?;
        layout.push((name, shape, len));
    }
    let remaining = bytes.len() - r.pos;
    let needed = total.checked_mul(dtype.width()).ok_or_else(|| Error::Format {
        what: WHAT,
        detail: "payload size overflows".into(),
    })?;
    if remaining < needed {
        return Err(Error::Truncated {
            what: WHAT,
            detail: format!("payload needs {needed} bytes, {remaining} available"),
        });
    }
    if remaining > needed {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("{} trailing bytes", remaining - needed),
        });
    }
    let mut params = ParamVector::new();
    for (name, shape, len) in layout {
        let raw = r.take(len * dtype.width(), "payload")?;
        let values: Vec<f64> = match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
                .collect(),
        };
        params.add_group(&name, &shape, values)?;
    }
    Ok(Checkpoint { params, meta })
}

pub fn save(path: &Path, params: &ParamVector, meta: &str) -> Result<()> {
    std::fs::write(path, encode(params, meta, Dtype::F64)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
