//! Multi-resolution spatial-hash feature grid.
//!
//! Each level covers the same axis-aligned box at its own resolution. A
//! point is encoded by trilinearly interpolating the features stored at
//! the 8 enclosing vertices of every level; vertices are addressed by
//! XOR-ing coordinate-wise products with large odd primes, modulo the
//! (power of two) table size.

use serde::{Deserialize, Serialize};

use super::vec3::Vec3;
use crate::diffmath::{CustomOp, Graph, SeedRng, Tensor, Var};
use crate::{Error, Result};

pub const PRIMES: [u64; 3] = [2_654_435_761, 805_459_861, 3_674_653_429];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub log2_table_size: u32,
    pub features: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            log2_table_size: 14,
            features: 2,
            base_resolution: 16,
            max_resolution: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    config: HashGridConfig,
    resolutions: Vec<usize>,
    bbox_min: Vec3,
    bbox_max: Vec3,
}

/// One level's interpolation stencil for a point.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    index: [usize; 8],
    weight: [f64; 8],
    /// d weight / d normalised coordinate, per axis.
    dweight: [[f64; 3]; 8],
}

impl HashGrid {
    pub fn new(config: HashGridConfig, bbox_min: Vec3, bbox_max: Vec3) -> Result<Self> {
        if config.levels == 0 || config.features == 0 {
            return Err(Error::invalid("hash grid needs at least one level and feature"));
        }
        if config.log2_table_size == 0 || config.log2_table_size > 26 {
            return Err(Error::invalid("hash table size must be 2^1 ..= 2^26"));
        }
        if config.base_resolution < 1 || config.max_resolution < config.base_resolution {
            return Err(Error::invalid("hash grid resolutions must satisfy 1 <= base <= max"));
        }
        if (0..3).any(|d| !(bbox_max[d] > bbox_min[d])) {
            return Err(Error::invalid("hash grid box is empty"));
        }
        let l = config.levels;
        let growth = if l > 1 {
            ((config.max_resolution as f64).ln() - (config.base_resolution as f64).ln()) / (l - 1) as f64
        } else {
            0.0
        };
        let resolutions: Vec<usize> = (0..l)
            .map(|i| (config.base_resolution as f64 * (growth * i as f64).exp() + 1e-9).floor() as usize)
            .collect();
        if resolutions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "hash grid resolutions not strictly increasing: {resolutions:?}"
            )));
        }
        Ok(Self {
            config,
            resolutions,
            bbox_min,
            bbox_max,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn table_size(&self) -> usize {
        1usize << self.config.log2_table_size
    }

    pub fn output_width(&self) -> usize {
        self.config.levels * self.config.features
    }

    pub fn table_shape(&self) -> [usize; 3] {
        [self.config.levels, self.table_size(), self.config.features]
    }

    pub fn table_len(&self) -> usize {
        self.table_shape().iter().product()
    }

    /// Uniform initialisation in `[-scale, scale]`.
    pub fn init_table(&self, rng: &mut SeedRng, scale: f64) -> Vec<f64> {
        (0..self.table_len()).map(|_| rng.uniform_range(-scale, scale)).collect()
    }

    pub fn hash(&self, v: [u64; 3]) -> usize {
        let h = v[0].wrapping_mul(PRIMES[0]) ^ v[1].wrapping_mul(PRIMES[1]) ^ v[2].wrapping_mul(PRIMES[2]);
        (h & (self.table_size() as u64 - 1)) as usize
    }

    /// Normalise into `[0,1]^3`, clamping; returns whether clamping occurred
    /// and which axes are inside (for gradients).
    fn normalise(&self, p: Vec3) -> (Vec3, bool, [bool; 3]) {
        let mut out = [0.0; 3];
        let mut clamped = false;
        let mut inside = [true; 3];
        for d in 0..3 {
            let x = (p[d] - self.bbox_min[d]) / (self.bbox_max[d] - self.bbox_min[d]);
            if !(0.0..=1.0).contains(&x) {
                clamped = true;
                inside[d] = false;
            }
            out[d] = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
        }
        (out, clamped, inside)
    }

    fn stencil(&self, level: usize, x: Vec3) -> Stencil {
        let res = self.resolutions[level];
        let mut base = [0u64; 3];
        let mut frac = [0.0; 3];
        for d in 0..3 {
            let s = x[d] * res as f64;
            let i = (s.floor() as usize).min(res - 1);
            base[d] = i as u64;
            frac[d] = s - i as f64;
        }
        let table_offset = level * self.table_size();
        let mut st = Stencil {
            index: [0; 8],
            weight: [0.0; 8],
            dweight: [[0.0; 3]; 8],
        };
        for c in 0..8 {
            let bit = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut w = 1.0;
            let mut f = [0.0; 3];
            for d in 0..3 {
                f[d] = if bit[d] == 1 { frac[d] } else { 1.0 - frac[d] };
                w *= f[d];
            }
            for d in 0..3 {
                let sign = if bit[d] == 1 { 1.0 } else { -1.0 };
                let others: f64 = (0..3).filter(|&e| e != d).map(|e| f[e]).product();
                st.dweight[c][d] = sign * others * res as f64;
            }
            let v = [base[0] + bit[0] as u64, base[1] + bit[1] as u64, base[2] + bit[2] as u64];
            st.index[c] = table_offset + self.hash(v);
            st.weight[c] = w;
        }
        st
    }

    /// Encode one point. Returns the `L*F` features and whether the point
    /// had to be clamped into the box.
    pub fn encode(&self, table: &[f64], p: Vec3) -> Result<(Vec<f64>, bool)> {
        if table.len() != self.table_len() {
            return Err(Error::shape(
                "hash_encode",
                format!("table has {} values, grid needs {}", table.len(), self.table_len()),
            ));
        }
        let f = self.config.features;
        let (x, clamped, _) = self.normalise(p);
        let mut out = vec![0.0; self.output_width()];
        for l in 0..self.config.levels {
            let st = self.stencil(l, x);
            for c in 0..8 {
                for k in 0..f {
                    out[l * f + k] += st.weight[c] * table[st.index[c] * f + k];
                }
            }
        }
        Ok((out, clamped))
    }

    /// Batched encoding on a graph. `positions` is `[n, 3]`, `table` is the
    /// grid's feature table. Returns the `[n, L*F]` features and the number
    /// of clamped points.
    pub fn encode_graph(&self, g: &mut Graph, positions: Var, table: Var) -> Result<(Var, usize)> {
        let (pt, tt) = (g.value(positions), g.value(table));
        if pt.cols() != 3 {
            return Err(Error::shape("hash_encode", format!("positions {:?}", pt.shape())));
        }
        if tt.len() != self.table_len() {
            return Err(Error::shape(
                "hash_encode",
                format!("table has {} values, grid needs {}", tt.len(), self.table_len()),
            ));
        }
        let n = pt.rows();
        let f = self.config.features;
        let width = self.output_width();
        let mut out = vec![0.0; n * width];
        let mut clamped = 0;
        for i in 0..n {
            let p = pt.row_slice(i);
            let (x, c, _) = self.normalise([p[0], p[1], p[2]]);
            clamped += c as usize;
            let row = &mut out[i * width..(i + 1) * width];
            for l in 0..self.config.levels {
                let st = self.stencil(l, x);
                for c in 0..8 {
                    let w = st.weight[c];
                    let src = &tt.data()[st.index[c] * f..st.index[c] * f + f];
                    for k in 0..f {
                        row[l * f + k] += w * src[k];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, width], out)?;
        let v = g.custom(Box::new(HashEncodeOp { grid: self.clone() }), &[positions, table], value)?;
        Ok((v, clamped))
    }
}

struct HashEncodeOp {
    grid: HashGrid,
}

impl CustomOp for HashEncodeOp {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (pt, tt) = (inputs[0], inputs[1]);
        let grid = &self.grid;
        let f = grid.config.features;
        let width = grid.output_width();
        let extent: Vec<f64> = (0..3).map(|d| grid.bbox_max[d] - grid.bbox_min[d]).collect();
        let mut gp = needs[0].then(|| vec![0.0; pt.len()]);
        let mut gt = needs[1].then(|| vec![0.0; tt.len()]);
        for i in 0..pt.rows() {
            let p = pt.row_slice(i);
            let (x, _, inside) = grid.normalise([p[0], p[1], p[2]]);
            let grow = &g.data()[i * width..(i + 1) * width];
            for l in 0..grid.config.levels {
                let st = grid.stencil(l, x);
                let gl = &grow[l * f..(l + 1) * f];
                for c in 0..8 {
                    let base = st.index[c] * f;
                    if let Some(gt) = gt.as_mut() {
                        for k in 0..f {
                            gt[base + k] += st.weight[c] * gl[k];
                        }
                    }
                    if let Some(gp) = gp.as_mut() {
                        let dot: f64 = (0..f).map(|k| gl[k] * tt.data()[base + k]).sum();
                        for d in 0..3 {
                            if inside[d] {
                                gp[i * 3 + d] += dot * st.dweight[c][d] / extent[d];
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![
            gp.map(|d| Tensor::new(pt.shape().to_vec(), d)).transpose()?,
            gt.map(|d| Tensor::new(tt.shape().to_vec(), d)).transpose()?,
        ])
    }
}
