//! Deformation network, hash-grid appearance network and per-frame codes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::posenc::{encoded_width, posenc};
use crate::diffmath::container;
use crate::diffmath::params::has_prefix;
use crate::diffmath::{Activation, Graph, Mlp, ParamBinding, ParamVector, SeedRng, Tensor, Var};
use crate::volren::{
    all_pixels, composite_graph, generate_rays, stratified_samples, stratum_length, Camera, HashGrid, HashGridConfig,
    Image, Ray, SceneBounds,
};
use crate::{Error, Result};

pub const DEFORMATION: &str = "deformation";
pub const APPEARANCE_GRID: &str = "appearance_grid";
pub const APPEARANCE_MLP: &str = "appearance_mlp";
pub const EMBEDDINGS: &str = "embeddings";

pub fn is_appearance(name: &str) -> bool {
    has_prefix(name, APPEARANCE_GRID) || has_prefix(name, APPEARANCE_MLP)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvatarConfig {
    pub embed_dim: usize,
    pub pe_freqs: usize,
    pub deform_width: usize,
    /// Hidden layers of the deformation MLP.
    pub deform_depth: usize,
    pub appearance_width: usize,
    pub appearance_depth: usize,
    pub grid: HashGridConfig,
    pub grid_init: f64,
    pub view_conditioning: bool,
    pub samples_per_ray: usize,
    pub bounds: SceneBounds,
    pub background: [f64; 3],
}

impl Default for AvatarConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            pe_freqs: 4,
            deform_width: 64,
            deform_depth: 4,
            appearance_width: 64,
            appearance_depth: 2,
            grid: HashGridConfig::default(),
            grid_init: 1e-4,
            view_conditioning: true,
            samples_per_ray: 64,
            bounds: SceneBounds::default(),
            background: [1.0; 3],
        }
    }
}

impl AvatarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.deform_width == 0 || self.appearance_width == 0 {
            return Err(Error::Config("avatar widths must be positive".into()));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::Config("avatar needs at least two samples per ray".into()));
        }
        if !(self.bounds.radius > 0.0) {
            return Err(Error::Config("scene bounds radius must be positive".into()));
        }
        Ok(())
    }
}

/// Outputs of evaluating the networks on a batch of world points.
pub struct PointOutputs {
    pub sigma: Var,
    pub rgb: Var,
    /// `D(p, e)`.
    pub offset: Var,
    pub canonical: Var,
    /// Canonical points clamped into the grid box.
    pub clamped: usize,
}

pub struct RenderOutputs {
    /// `[R, 4]`: composited RGB, then accumulated opacity.
    pub rgba: Var,
    pub points: PointOutputs,
}

#[derive(Clone, Debug)]
pub struct DynamicAvatar {
    pub config: AvatarConfig,
    pub frames: usize,
    pub params: ParamVector,
    grid: HashGrid,
    deform: Mlp,
    appearance: Mlp,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    kind: String,
    frames: usize,
    config: AvatarConfig,
}

impl PartialEq for DynamicAvatar {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.frames == other.frames && self.params == other.params
    }
}

impl DynamicAvatar {
    fn networks(config: &AvatarConfig) -> Result<(HashGrid, Mlp, Mlp)> {
        config.validate()?;
        let (lo, hi) = config.bounds.bbox();
        let grid = HashGrid::new(config.grid.clone(), lo, hi)?;
        let mut dsizes = vec![encoded_width(config.pe_freqs) + config.embed_dim];
        dsizes.extend(std::iter::repeat(config.deform_width).take(config.deform_depth));
        dsizes.push(3);
        let deform = Mlp::new(DEFORMATION, dsizes, Activation::Silu, Activation::Identity);
        let mut asizes = vec![grid.output_width() + 3 + config.embed_dim];
        asizes.extend(std::iter::repeat(config.appearance_width).take(config.appearance_depth));
        asizes.push(4);
        let appearance = Mlp::new(APPEARANCE_MLP, asizes, Activation::Silu, Activation::Identity);
        Ok((grid, deform, appearance))
    }

    /// Fresh avatar; the deformation output layer starts at zero so the
    /// initial warp is the identity.
    pub fn new(config: AvatarConfig, frames: usize, rng: &mut SeedRng) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("avatar needs at least one frame"));
        }
        let (grid, deform, appearance) = Self::networks(&config)?;
        let mut params = ParamVector::new();
        deform.init(&mut params, &mut rng.fork("deformation"), true)?;
        let table = grid.init_table(&mut rng.fork("grid"), config.grid_init);
        params.add_group(APPEARANCE_GRID, &grid.table_shape(), table)?;
        appearance.init(&mut params, &mut rng.fork("appearance"), false)?;
        let mut er = rng.fork("embeddings");
        let emb = (0..frames * config.embed_dim).map(|_| 0.01 * er.normal()).collect();
        params.add_group(EMBEDDINGS, &[frames, config.embed_dim], emb)?;
        Ok(Self {
            config,
            frames,
            params,
            grid,
            deform,
            appearance,
        })
    }

    pub fn grid(&self) -> &HashGrid {
        &self.grid
    }

    pub fn deformation_mlp(&self) -> &Mlp {
        &self.deform
    }

    pub fn appearance_mlp(&self) -> &Mlp {
        &self.appearance
    }

    pub fn embedding(&self, frame: usize) -> Result<&[f64]> {
        if frame >= self.frames {
            return Err(Error::invalid(format!("frame {frame} outside {} embeddings", self.frames)));
        }
        let d = self.config.embed_dim;
        Ok(&self.params.group(EMBEDDINGS)?[frame * d..(frame + 1) * d])
    }

    pub fn embeddings(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.frames).map(|j| self.embedding(j).map(<[f64]>::to_vec)).collect()
    }

    fn check_frames(&self, frames: &[usize]) -> Result<()> {
        match frames.iter().find(|&&f| f >= self.frames) {
            Some(f) => Err(Error::invalid(format!("frame {f} outside {} embeddings", self.frames))),
            None => Ok(()),
        }
    }

    /// Deformation only: `(D(p, e), p + D(p, e))` for points `[n,3]`.
    pub fn deform_graph(&self, g: &mut Graph, b: &ParamBinding, positions: Var, frames: &[usize]) -> Result<(Var, Var)> {
        self.check_frames(frames)?;
        if g.value(positions).rows() != frames.len() {
            return Err(Error::shape("deform", "one frame index per point"));
        }
        let e = g.gather(b.var(EMBEDDINGS)?, frames.to_vec())?;
        let pe = posenc(g, positions, self.config.pe_freqs)?;
        let din = g.concat(&[pe, e])?;
        let offset = self.deform.forward(g, b, din)?;
        let canonical = g.add(positions, offset)?;
        Ok((offset, canonical))
    }

    /// Appearance only, at canonical points: `(sigma [n,1], rgb [n,3], clamped)`.
    pub fn appearance_graph(
        &self,
        g: &mut Graph,
        b: &ParamBinding,
        canonical: Var,
        dirs: &Tensor,
        frames: &[usize],
    ) -> Result<(Var, Var, usize)> {
        self.check_frames(frames)?;
        let e = g.gather(b.var(EMBEDDINGS)?, frames.to_vec())?;
        let (feats, clamped) = self.grid.encode_graph(g, canonical, b.var(APPEARANCE_GRID)?)?;
        let view = if self.config.view_conditioning {
            dirs.clone()
        } else {
            Tensor::zeros(dirs.shape().to_vec())
        };
        let view = g.constant(view)?;
        let ain = g.concat(&[feats, view, e])?;
        let raw = self.appearance.forward(g, b, ain)?;
        let s = g.slice(raw, 0, 1)?;
        let sigma = g.activation(s, Activation::Softplus)?;
        let c = g.slice(raw, 1, 3)?;
        let rgb = g.activation(c, Activation::Sigmoid)?;
        Ok((sigma, rgb, clamped))
    }

    pub fn eval_points(
        &self,
        g: &mut Graph,
        b: &ParamBinding,
        positions: Var,
        dirs: &Tensor,
        frames: &[usize],
    ) -> Result<PointOutputs> {
        let (offset, canonical) = self.deform_graph(g, b, positions, frames)?;
        let (sigma, rgb, clamped) = self.appearance_graph(g, b, canonical, dirs, frames)?;
        Ok(PointOutputs {
            sigma,
            rgb,
            offset,
            canonical,
            clamped,
        })
    }

    /// Volume-render `rays`, ray `i` at frame `frames[i]`. Without `rng`
    /// samples sit at stratum midpoints.
    pub fn render_rays(
        &self,
        g: &mut Graph,
        b: &ParamBinding,
        rays: &[Ray],
        frames: &[usize],
        mut rng: Option<&mut SeedRng>,
    ) -> Result<RenderOutputs> {
        if rays.len() != frames.len() {
            return Err(Error::shape("render_rays", "one frame index per ray"));
        }
        let n = self.config.samples_per_ray;
        let total = rays.len() * n;
        let mut pos = Vec::with_capacity(total * 3);
        let mut dirs = Vec::with_capacity(total * 3);
        let mut delta = Vec::with_capacity(total);
        let mut pf = Vec::with_capacity(total);
        for (ray, &f) in rays.iter().zip(frames) {
            let ts = stratified_samples(ray, n, rng.as_deref_mut());
            let d = stratum_length(ray, n);
            for t in ts {
                pos.extend(ray.at(t));
                dirs.extend(ray.dir);
                delta.push(d);
                pf.push(f);
            }
        }
        let positions = g.constant(Tensor::new(vec![total, 3], pos)?)?;
        let dirs = Tensor::new(vec![total, 3], dirs)?;
        let points = self.eval_points(g, b, positions, &dirs, &pf)?;
        let sigma = g.reshape(points.sigma, &[rays.len(), n])?;
        let rgba = composite_graph(g, sigma, points.rgb, delta, self.config.background)?;
        Ok(RenderOutputs { rgba, points })
    }

    /// Deterministic full-image render (stratum midpoints) when `rng` is
    /// `None`.
    pub fn render_frame(&self, camera: &Camera, frame: usize, mut rng: Option<&mut SeedRng>) -> Result<Image> {
        self.check_frames(&[frame])?;
        let pixels = all_pixels(camera);
        let rays = generate_rays(camera, &pixels, &self.config.bounds)?;
        let mut data = Vec::with_capacity(pixels.len() * 3);
        const CHUNK: usize = 512;
        for chunk in rays.chunks(CHUNK) {
            let mut g = Graph::new();
            let b = g.bind(&self.params, |_| false)?;
            let out = self.render_rays(&mut g, &b, chunk, &vec![frame; chunk.len()], rng.as_deref_mut())?;
            for row in g.value(out.rgba).data().chunks(4) {
                data.extend_from_slice(&row[..3]);
            }
        }
        Image::new(camera.width, camera.height, data)
    }

    /// Single-point deformation `p_c = p + D(p, e_frame)`.
    pub fn deform(&self, p: [f64; 3], frame: usize) -> Result<[f64; 3]> {
        let mut g = Graph::new();
        let b = g.bind(&self.params, |_| false)?;
        let pv = g.constant(Tensor::row(&p))?;
        let (_, c) = self.deform_graph(&mut g, &b, pv, &[frame])?;
        let d = g.value(c).data();
        Ok([d[0], d[1], d[2]])
    }

    /// Single-point appearance at a canonical point: `(rgb, sigma)`.
    pub fn appearance(&self, pc: [f64; 3], view: [f64; 3], frame: usize) -> Result<([f64; 3], f64)> {
        let mut g = Graph::new();
        let b = g.bind(&self.params, |_| false)?;
        let pv = g.constant(Tensor::row(&pc))?;
        let (s, c, _) = self.appearance_graph(&mut g, &b, pv, &Tensor::row(&view), &[frame])?;
        let rgb = g.value(c).data();
        Ok(([rgb[0], rgb[1], rgb[2]], g.value(s).data()[0]))
    }

    fn meta(&self) -> String {
        serde_json::to_string(&Meta {
            kind: "avatar".into(),
            frames: self.frames,
            config: self.config.clone(),
        })
        .expect("meta serialises")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::encode(&self.params, &self.meta(), container::Dtype::F64)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = container::decode(bytes)?;
        let meta: Meta = serde_json::from_str(&ck.meta).map_err(|e| Error::Format {
            what: "avatar checkpoint",
            detail: e.to_string(),
        })?;
        if meta.kind != "avatar" {
            return Err(Error::Format {
                what: "avatar checkpoint",
                detail: format!("checkpoint holds `{}`", meta.kind),
            });
        }
        let mut fresh = Self::new(meta.config, meta.frames, &mut SeedRng::new(0))?;
        if !fresh.params.same_layout(&ck.params) {
            return Err(Error::Format {
                what: "avatar checkpoint",
                detail: "parameter groups do not match the stored config".into(),
            });
        }
        fresh.params = ck.params;
        Ok(fresh)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{gradient_filtered, grad_check};

    fn tiny_config() -> AvatarConfig {
        AvatarConfig {
            deform_width: 8,
            deform_depth: 2,
            appearance_width: 8,
            appearance_depth: 1,
            grid: HashGridConfig {
                levels: 2,
                log2_table_size: 8,
                features: 2,
                base_resolution: 4,
                max_resolution: 8,
            },
            grid_init: 0.5,
            samples_per_ray: 8,
            ..AvatarConfig::default()
        }
    }

    fn cam() -> Camera {
        Camera::look_at([0.0, 0.5, 4.0], [0.0; 3], [0.0, 1.0, 0.0], 40.0, 6, 5).unwrap()
    }

    #[test]
    fn zero_final_layer_is_identity_warp() {
        let a = DynamicAvatar::new(tiny_config(), 3, &mut SeedRng::new(1)).unwrap();
        let mut rng = SeedRng::new(2);
        for f in 0..3 {
            let p = [rng.normal(), rng.normal(), rng.normal()];
            assert_eq!(a.deform(p, f).unwrap(), p);
        }
        // With equal time codes every frame renders the canonical scene.
        let mut b = a.clone();
        let e0 = b.embedding(0).unwrap().to_vec();
        for f in 1..3 {
            b.params.group_mut(EMBEDDINGS).unwrap()[f * 8..(f + 1) * 8].copy_from_slice(&e0);
        }
        let f0 = b.render_frame(&cam(), 0, None).unwrap();
        assert_eq!(b.render_frame(&cam(), 1, None).unwrap(), f0);
        assert_eq!(b.render_frame(&cam(), 2, None).unwrap(), f0);
    }

    #[test]
    fn zero_networks_give_half_grey_and_softplus_zero() {
        let mut a = DynamicAvatar::new(tiny_config(), 1, &mut SeedRng::new(1)).unwrap();
        a.params.values_mut().fill(0.0);
        let (rgb, sigma) = a.appearance([0.1, 0.2, 0.3], [0.0, 0.0, 1.0], 0).unwrap();
        assert_eq!(rgb, [0.5; 3]);
        assert!((sigma - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn view_conditioning_off_ignores_direction() {
        let cfg = AvatarConfig {
            view_conditioning: false,
            ..tiny_config()
        };
        let a = DynamicAvatar::new(cfg, 1, &mut SeedRng::new(3)).unwrap();
        let pc = [0.2, -0.1, 0.4];
        assert_eq!(
            a.appearance(pc, [0.0, 0.0, 1.0], 0).unwrap(),
            a.appearance(pc, [0.0, 0.0, -1.0], 0).unwrap()
        );
    }

    #[test]
    fn zero_density_renders_background() {
        let mut a = DynamicAvatar::new(tiny_config(), 1, &mut SeedRng::new(4)).unwrap();
        // Very negative density logit everywhere.
        let last = a.appearance_mlp().layers() - 1;
        let bname = a.appearance_mlp().bias_name(last);
        let wname = a.appearance_mlp().weight_name(last);
        a.params.group_mut(&wname).unwrap().fill(0.0);
        a.params.group_mut(&bname).unwrap()[0] = -800.0;
        let img = a.render_frame(&cam(), 0, None).unwrap();
        assert!(img.data.iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn render_is_deterministic() {
        let a = DynamicAvatar::new(tiny_config(), 2, &mut SeedRng::new(5)).unwrap();
        let r1 = a.render_frame(&cam(), 1, Some(&mut SeedRng::new(9))).unwrap();
        let r2 = a.render_frame(&cam(), 1, Some(&mut SeedRng::new(9))).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = DynamicAvatar::new(tiny_config(), 2, &mut SeedRng::new(6)).unwrap();
        let b = DynamicAvatar::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        let names: Vec<_> = a.params.groups().iter().map(|g| g.name.clone()).collect();
        assert!(names.iter().any(|n| n.starts_with("deformation.")));
        assert!(names.iter().any(|n| n == APPEARANCE_GRID));
        assert!(names.iter().any(|n| n.starts_with("appearance_mlp.")));
        assert!(names.iter().any(|n| n == EMBEDDINGS));
    }

    #[test]
    fn deform_gradient_wrt_points_matches_finite_differences() {
        let mut a = DynamicAvatar::new(tiny_config(), 2, &mut SeedRng::new(7)).unwrap();
        // Non-trivial warp.
        let mut rng = SeedRng::new(8);
        for v in a.params.values_mut() {
            *v += 0.3 * rng.normal();
        }
        let c = rng.normal_vec(9);
        let f = |x: &[f64]| {
            let mut g = Graph::new();
            let b = g.bind(&a.params, |_| false).unwrap();
            let p = g.leaf(Tensor::new(vec![3, 3], x.to_vec()).unwrap(), true).unwrap();
            let (_, pc) = a.deform_graph(&mut g, &b, p, &[0, 1, 1]).unwrap();
            let l = g.dot_const(pc, Tensor::new(vec![3, 3], c.clone()).unwrap()).unwrap();
            let gr = g.backward(l).unwrap();
            (g.value(l).data()[0], gr.get(p).unwrap().data().to_vec())
        };
        let x: Vec<f64> = (0..9).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        assert!(grad_check(f, &x, 1e-4) < 1e-4);
    }

    #[test]
    fn render_loss_gradient_wrt_appearance_matches_finite_differences() {
        let a = DynamicAvatar::new(tiny_config(), 1, &mut SeedRng::new(10)).unwrap();
        let c = cam();
        let rays = generate_rays(&c, &[(1, 1), (3, 2), (4, 4)], &a.config.bounds).unwrap();
        let target = Tensor::new(vec![3, 4], SeedRng::new(11).normal_vec(12)).unwrap();
        let x0 = a.params.clone();
        let loss_at = |values: &[f64]| {
            let mut p = x0.clone();
            p.values_mut().copy_from_slice(values);
            let (v, gr) = gradient_filtered(&p, is_appearance, |g, b| {
                let out = a.render_rays(g, b, &rays, &[0, 0, 0], None)?;
                g.dot_const(out.rgba, target.clone())
            })
            .unwrap();
            (v, gr.values().to_vec())
        };
        // Check only appearance coordinates that actually influence the loss.
        let (_, g0) = loss_at(x0.values());
        let idx: Vec<usize> = (0..x0.len()).filter(|&i| g0[i] != 0.0).take(200).collect();
        assert!(!idx.is_empty());
        let f = |sub: &[f64]| {
            let mut full = x0.values().to_vec();
            for (k, &i) in idx.iter().enumerate() {
                full[i] = sub[k];
            }
            let (v, g) = loss_at(&full);
            (v, idx.iter().map(|&i| g[i]).collect())
        };
        let x: Vec<f64> = idx.iter().map(|&i| x0.values()[i]).collect();
        let err = grad_check(f, &x, 1e-5);
        assert!(err < 1e-4, "{err}");
    }
}
