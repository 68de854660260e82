//! Discrete emission-absorption compositing.

use crate::diffmath::{CustomOp, Graph, Tensor, Var};
use crate::{Error, Result};

/// Samples along one ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub delta: Vec<f64>,
}

impl RaySamples {
    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if self.sigma.len() != n || self.color.len() != n || self.delta.len() != n {
            return Err(Error::shape(
                "composite",
                format!(
                    "t {}, sigma {}, color {}, delta {}",
                    n,
                    self.sigma.len(),
                    self.color.len(),
                    self.delta.len()
                ),
            ));
        }
        if self.t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("sample positions must be strictly increasing"));
        }
        if let Some(s) = self.sigma.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("negative or non-finite density {s}")));
        }
        if let Some(d) = self.delta.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::invalid(format!("segment length must be positive, got {d}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    /// Colour composited over the background.
    pub color: [f64; 3],
    /// Accumulated opacity `sum(weights)`.
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// Transmittance before each sample; one extra entry for after the last.
    pub transmittance: Vec<f64>,
}

pub fn composite(samples: &RaySamples, background: [f64; 3]) -> Result<Composite> {
    samples.validate()?;
    let n = samples.t.len();
    let mut weights = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n + 1);
    let mut color = [0.0; 3];
    let mut optical = 0.0f64;
    trans.push(1.0);
    for i in 0..n {
        let t_i = (-optical).exp();
        optical += samples.sigma[i] * samples.delta[i];
        let t_next = (-optical).exp();
        // T_i * alpha_i, written to avoid cancellation.
        let w = t_i * -(-samples.sigma[i] * samples.delta[i]).exp_m1();
        weights.push(w);
        trans.push(t_next);
        for k in 0..3 {
            color[k] += w * samples.color[i][k];
        }
    }
    let t_end = trans[n];
    for k in 0..3 {
        color[k] += t_end * background[k];
    }
    Ok(Composite {
        color,
        opacity: weights.iter().sum(),
        weights,
        transmittance: trans,
    })
}

/// Batched compositing on a graph.
///
/// `sigma` is `[R, N]`, `rgb` is `[R * N, 3]` (sample-major within each
/// ray), `delta` holds `R * N` segment lengths. The output is `[R, 4]`:
/// composited RGB over `background` followed by the accumulated opacity.
pub fn composite_graph(g: &mut Graph, sigma: Var, rgb: Var, delta: Vec<f64>, background: [f64; 3]) -> Result<Var> {
    let (st, ct) = (g.value(sigma), g.value(rgb));
    let (r, n) = match *st.shape() {
        [r, n] => (r, n),
        ref s => return Err(Error::shape("composite", format!("sigma must be [R,N], got {s:?}"))),
    };
    if ct.len() != r * n * 3 || delta.len() != r * n {
        return Err(Error::shape(
            "composite",
            format!("sigma {:?}, rgb {:?}, delta {}", st.shape(), ct.shape(), delta.len()),
        ));
    }
    if st.data().iter().any(|s| *s < 0.0) || delta.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("composite needs sigma >= 0 and delta > 0"));
    }
    let mut out = vec![0.0; r * 4];
    for ray in 0..r {
        let mut optical = 0.0f64;
        let mut acc = [0.0; 4];
        for i in 0..n {
            let j = ray * n + i;
            let t_i = (-optical).exp();
            let sd = st.data()[j] * delta[j];
            optical += sd;
            let w = t_i * -(-sd).exp_m1();
            for k in 0..3 {
                acc[k] += w * ct.data()[j * 3 + k];
            }
            acc[3] += w;
        }
        let t_end = (-optical).exp();
        for k in 0..3 {
            acc[k] += t_end * background[k];
        }
        out[ray * 4..ray * 4 + 4].copy_from_slice(&acc);
    }
    let value = Tensor::new(vec![r, 4], out)?;
    g.custom(Box::new(CompositeOp { delta, background, n }), &[sigma, rgb], value)
}

struct CompositeOp {
    delta: Vec<f64>,
    background: [f64; 3],
    n: usize,
}

impl CustomOp for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (st, ct) = (inputs[0], inputs[1]);
        let n = self.n;
        let r = st.rows();
        let mut gs = vec![0.0; st.len()];
        let mut gc = vec![0.0; ct.len()];
        let mut w = vec![0.0; n];
        let mut t_next = vec![0.0; n];
        for ray in 0..r {
            let g = &grad.data()[ray * 4..ray * 4 + 4];
            let mut optical = 0.0f64;
            for i in 0..n {
                let j = ray * n + i;
                let t_i = (-optical).exp();
                let sd = st.data()[j] * self.delta[j];
                optical += sd;
                w[i] = t_i * -(-sd).exp_m1();
                t_next[i] = (-optical).exp();
            }
            let t_end = (-optical).exp();
            // Upstream-weighted colour of a sample: g_rgb . c.
            let gc_dot = |j: usize| (0..3).map(|k| g[k] * ct.data()[j * 3 + k]).sum::<f64>();
            let bg_dot: f64 = (0..3).map(|k| g[k] * self.background[k]).sum();
            let mut suffix = 0.0; // sum_{i>k} w_i (g . c_i)
            for i in (0..n).rev() {
                let j = ray * n + i;
                if needs[1] {
                    for k in 0..3 {
                        gc[j * 3 + k] = w[i] * g[k];
                    }
                }
                let d = self.delta[j];
                gs[j] = d * (t_next[i] * gc_dot(j) - suffix - t_end * bg_dot) + g[3] * d * t_end;
                suffix += w[i] * gc_dot(j);
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(st.shape().to_vec(), gs)).transpose()?,
            needs[1].then(|| Tensor::new(ct.shape().to_vec(), gc)).transpose()?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{grad_check, SeedRng};

    fn uniform_samples(n: usize, sigma: f64, color: [f64; 3], length: f64) -> RaySamples {
        let d = length / n as f64;
        RaySamples {
            t: (0..n).map(|i| (i as f64 + 0.5) * d).collect(),
            sigma: vec![sigma; n],
            color: vec![color; n],
            delta: vec![d; n],
        }
    }

    fn random_samples(rng: &mut SeedRng, n: usize) -> RaySamples {
        let d = 2.0 / n as f64;
        RaySamples {
            t: (0..n).map(|i| (i as f64 + 0.5) * d).collect(),
            sigma: (0..n).map(|_| rng.uniform_range(0.0, 3.0)).collect(),
            color: (0..n).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect(),
            delta: vec![d; n],
        }
    }

    #[test]
    fn zero_density_gives_background() {
        let bg = [1.0, 0.5, 0.25];
        let c = composite(&uniform_samples(16, 0.0, [0.2; 3], 1.0), bg).unwrap();
        assert_eq!(c.color, bg);
        assert_eq!(c.opacity, 0.0);
        assert!(c.transmittance.iter().all(|t| *t == 1.0));
    }

    #[test]
    fn homogeneous_medium_matches_closed_form() {
        let c = composite(&uniform_samples(256, 1.0, [0.3, 0.6, 0.9], 1.0), [0.0; 3]).unwrap();
        let expect = 1.0 - (-1.0f64).exp();
        assert!((c.opacity - 0.6321).abs() < 1e-3);
        assert!((c.opacity - expect).abs() < 1e-3);
        assert!((c.color[1] - 0.6 * expect).abs() < 1e-3);
    }

    #[test]
    fn coarse_and_fine_quadrature_agree() {
        let mut rng = SeedRng::new(3);
        for _ in 0..20 {
            // A smooth random density/colour field along [0, 2].
            let a: Vec<f64> = (0..4).map(|_| rng.uniform_range(0.0, 1.5)).collect();
            let field = |t: f64| {
                let s = a[0] + a[1] * (1.0 + (3.0 * t).sin());
                let c = [0.5 + 0.4 * (a[2] * t).sin(), 0.5 + 0.4 * (a[3] * t).cos(), 0.3];
                (s, c)
            };
            let render = |n: usize| {
                let d = 2.0 / n as f64;
                let t: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * d).collect();
                let (sigma, color) = t.iter().map(|&t| field(t)).unzip();
                composite(&RaySamples { t, sigma, color, delta: vec![d; n] }, [1.0; 3]).unwrap()
            };
            let (c64, c4k) = (render(64), render(4096));
            for k in 0..3 {
                assert!((c64.color[k] - c4k.color[k]).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn negative_inputs_rejected() {
        let mut s = uniform_samples(4, 1.0, [0.5; 3], 1.0);
        s.sigma[2] = -0.1;
        assert!(composite(&s, [1.0; 3]).is_err());
        let mut s = uniform_samples(4, 1.0, [0.5; 3], 1.0);
        s.delta[0] = -1.0;
        assert!(composite(&s, [1.0; 3]).is_err());
    }

    #[test]
    fn weights_bounded_and_transmittance_monotone() {
        let mut rng = SeedRng::new(9);
        for _ in 0..1000 {
            let s = random_samples(&mut rng, 32);
            let c = composite(&s, [1.0; 3]).unwrap();
            assert!(c.weights.iter().all(|w| *w >= 0.0));
            assert!(c.opacity <= 1.0 + 1e-12);
            assert!(c.transmittance.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn graph_matches_scalar_path() {
        let mut rng = SeedRng::new(5);
        let rays: Vec<RaySamples> = (0..3).map(|_| random_samples(&mut rng, 8)).collect();
        let bg = [0.9, 1.0, 0.8];
        let mut g = Graph::new();
        let sig: Vec<f64> = rays.iter().flat_map(|r| r.sigma.clone()).collect();
        let rgb: Vec<f64> = rays.iter().flat_map(|r| r.color.iter().flatten().copied().collect::<Vec<_>>()).collect();
        let delta: Vec<f64> = rays.iter().flat_map(|r| r.delta.clone()).collect();
        let s = g.constant(Tensor::new(vec![3, 8], sig).unwrap()).unwrap();
        let c = g.constant(Tensor::new(vec![24, 3], rgb).unwrap()).unwrap();
        let out = composite_graph(&mut g, s, c, delta, bg).unwrap();
        for (i, r) in rays.iter().enumerate() {
            let want = composite(r, bg).unwrap();
            let row = g.value(out).row_slice(i);
            for k in 0..3 {
                assert!((row[k] - want.color[k]).abs() < 1e-14);
            }
            assert!((row[3] - want.opacity).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeedRng::new(21);
        for _ in 0..20 {
            let (r, n) = (2, 6);
            let delta: Vec<f64> = (0..r * n).map(|_| rng.uniform_range(0.05, 0.4)).collect();
            let up = rng.normal_vec(r * 4);
            let bg = [rng.uniform(), rng.uniform(), rng.uniform()];
            let mut x: Vec<f64> = (0..r * n).map(|_| rng.uniform_range(0.1, 3.0)).collect();
            x.extend((0..r * n * 3).map(|_| rng.uniform()));
            let f = |x: &[f64]| {
                let mut g = Graph::new();
                let s = g.leaf(Tensor::new(vec![r, n], x[..r * n].to_vec()).unwrap(), true).unwrap();
                let c = g.leaf(Tensor::new(vec![r * n, 3], x[r * n..].to_vec()).unwrap(), true).unwrap();
                let out = composite_graph(&mut g, s, c, delta.clone(), bg).unwrap();
                let l = g.dot_const(out, Tensor::new(vec![r, 4], up.clone()).unwrap()).unwrap();
                let gr = g.backward(l).unwrap();
                let mut grad = gr.get(s).unwrap().data().to_vec();
                grad.extend_from_slice(gr.get(c).unwrap().data());
                (g.value(l).data()[0], grad)
            };
            let err = grad_check(f, &x, 1e-4);
            assert!(err < 1e-4, "{err}");
        }
    }
}
