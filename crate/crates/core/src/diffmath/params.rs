use std::collections::HashMap;

use super::Tensor;
use crate::{Error, Result};

/// Shape metadata for one named slice of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat list of scalars partitioned into named groups.
///
/// Group names are hierarchical (`deformation.l0.weight`); prefix queries
/// select whole sub-networks for freezing and auditing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    groups: Vec<ParamGroup>,
    index: HashMap<String, usize>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_group(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::shape(
                "param group",
                format!("`{name}` shape {shape:?} vs {} values", values.len()),
            ));
        }
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter group `{name}`")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("param group `{name}`"),
            });
        }
        self.index.insert(name.to_string(), self.groups.len());
        self.groups.push(ParamGroup {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.values.len(),
        });
        self.values.extend(values);
        Ok(())
    }

    /// Copy every group of `other` into `self`, prefixing names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamVector) -> Result<()> {
        for g in &other.groups {
            let name = if prefix.is_empty() {
                g.name.clone()
            } else {
                format!("{prefix}.{}", g.name)
            };
            self.add_group(&name, &g.shape, other.values[g.range()].to_vec())?;
        }
        Ok(())
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group_info(&self, name: &str) -> Option<&ParamGroup> {
        self.index.get(name).map(|&i| &self.groups[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn group(&self, name: &str) -> Result<&[f64]> {
        let g = self.require(name)?;
        Ok(&self.values[g.range()])
    }

    pub fn group_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.require(name)?.range();
        Ok(&mut self.values[r])
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let g = self.require(name)?;
        Tensor::new(g.shape.clone(), self.values[g.range()].to_vec())
    }

    fn require(&self, name: &str) -> Result<&ParamGroup> {
        self.group_info(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter group `{name}`")))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            groups: self.groups.clone(),
            index: self.index.clone(),
        }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.groups == other.groups
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// New vector holding only groups whose name starts with `prefix`,
    /// with the prefix (and following dot) stripped.
    pub fn subset(&self, prefix: &str) -> Result<ParamVector> {
        let mut out = ParamVector::new();
        for g in self.groups.iter().filter(|g| has_prefix(&g.name, prefix)) {
            let name = g.name[prefix.len()..].trim_start_matches('.');
            out.add_group(name, &g.shape, self.values[g.range()].to_vec())?;
        }
        Ok(out)
    }

    /// Overwrite groups under `prefix` with the values of `sub` (the inverse
    /// of [`ParamVector::subset`]).
    pub fn assign_subset(&mut self, prefix: &str, sub: &ParamVector) -> Result<()> {
        for g in sub.groups() {
            let full = format!("{prefix}.{}", g.name);
            let dst = self.group_mut(&full)?;
            if dst.len() != g.len() {
                return Err(Error::shape("assign_subset", full));
            }
            dst.copy_from_slice(&sub.values[g.range()]);
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every value in groups under `prefix`.
    /// Used for bit-identity audits of frozen groups.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h = Fnv64::new();
        for g in self.groups.iter().filter(|g| has_prefix(&g.name, prefix)) {
            h.write(g.name.as_bytes());
            for v in &self.values[g.range()] {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn has_prefix(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

pub fn hash_f64s(values: &[f64]) -> u64 {
    let mut h = Fnv64::new();
    for v in values {
        h.write(&v.to_bits().to_le_bytes());
    }
    h.finish()
}
