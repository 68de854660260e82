use serde::{Deserialize, Serialize};

use super::graph::{Activation, Graph, ParamBinding, Var};
use super::{ParamVector, SeedRng, Tensor};
use crate::{Error, Result};

/// Fully connected network. Layer `i` owns groups `{name}.l{i}.weight`
/// (`[in, out]`) and `{name}.l{i}.bias` (`[out]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub name: String,
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new(name: &str, sizes: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        Self {
            name: name.to_string(),
            sizes,
            hidden,
            output,
        }
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.weight", self.name)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.bias", self.name)
    }

    /// Glorot-uniform weights, zero biases. With `zero_last` the final layer
    /// starts at zero so the network initially outputs `output(0)`.
    pub fn init(&self, params: &mut ParamVector, rng: &mut SeedRng, zero_last: bool) -> Result<()> {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let last = l + 1 == self.layers();
            let w = (0..fan_in * fan_out)
                .map(|_| if last && zero_last { 0.0 } else { rng.uniform_range(-a, a) })
                .collect();
            params.add_group(&self.weight_name(l), &[fan_in, fan_out], w)?;
            params.add_group(&self.bias_name(l), &[fan_out], vec![0.0; fan_out])?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, b: &ParamBinding, x: Var) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.input_width() {
            return Err(Error::shape(
                "mlp_forward",
                format!("`{}` expects input width {}, got {width}", self.name, self.input_width()),
            ));
        }
        let mut h = x;
        for l in 0..self.layers() {
            let w = b.var(&self.weight_name(l))?;
            let bias = b.var(&self.bias_name(l))?;
            h = g.matmul(h, w)?;
            h = g.add_bias(h, bias)?;
            let act = if l + 1 == self.layers() { self.output } else { self.hidden };
            h = g.activation(h, act)?;
        }
        Ok(h)
    }
}

/// Evaluate `mlp` on a single input vector.
pub fn mlp_forward(mlp: &Mlp, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != mlp.input_width() {
        return Err(Error::shape(
            "mlp_forward",
            format!("`{}` expects input width {}, got {}", mlp.name, mlp.input_width(), input.len()),
        ));
    }
    let mut g = Graph::new();
    let b = g.bind_prefix(params, &mlp.name, false)?;
    let x = g.constant(Tensor::row(input))?;
    let y = mlp.forward(&mut g, &b, x)?;
    Ok(g.value(y).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{gradient, grad_check};

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = Mlp::new("id", vec![3, 3], Activation::Silu, Activation::Identity);
        let mut p = ParamVector::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        p.add_group("id.l0.weight", &[3, 3], eye).unwrap();
        p.add_group("id.l0.bias", &[3], vec![0.0; 3]).unwrap();
        assert_eq!(mlp_forward(&mlp, &p, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let mlp = Mlp::new("z", vec![2, 2], Activation::Silu, Activation::Identity);
        let mut p = ParamVector::new();
        p.add_group("z.l0.weight", &[2, 2], vec![0.0; 4]).unwrap();
        p.add_group("z.l0.bias", &[2], vec![0.25, -4.0]).unwrap();
        assert_eq!(mlp_forward(&mlp, &p, &[9.0, -3.0]).unwrap(), vec![0.25, -4.0]);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mlp = Mlp::new("m", vec![2, 4, 1], Activation::Silu, Activation::Identity);
        let mut p = ParamVector::new();
        mlp.init(&mut p, &mut SeedRng::new(0), false).unwrap();
        let err = mlp_forward(&mlp, &p, &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("expects input width 2"), "{err}");
    }

    /// Plain nested-loop evaluation, independent of the graph.
    fn oracle(p: &ParamVector, sizes: &[usize], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in 0..sizes.len() - 1 {
            let w = p.group(&format!("r.l{l}.weight")).unwrap();
            let b = p.group(&format!("r.l{l}.bias")).unwrap();
            let mut out = b.to_vec();
            for (j, o) in out.iter_mut().enumerate() {
                for (i, hv) in h.iter().enumerate() {
                    *o += hv * w[i * sizes[l + 1] + j];
                }
            }
            if l + 2 < sizes.len() {
                for o in &mut out {
                    *o = Activation::Tanh.apply(*o);
                }
            }
            h = out;
        }
        h
    }

    #[test]
    fn random_net_matches_matrix_oracle() {
        let sizes = vec![4, 7, 3];
        let mlp = Mlp::new("r", sizes.clone(), Activation::Tanh, Activation::Identity);
        let mut rng = SeedRng::new(5);
        let mut p = ParamVector::new();
        mlp.init(&mut p, &mut rng, false).unwrap();
        for v in p.values_mut() {
            *v += 0.1;
        }
        let x = rng.normal_vec(4);
        let got = mlp_forward(&mlp, &p, &x).unwrap();
        let want = oracle(&p, &sizes, &x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn squared_error_gradient_matches_finite_differences() {
        let mlp = Mlp::new("r", vec![3, 8, 2], Activation::Silu, Activation::Identity);
        let mut rng = SeedRng::new(9);
        let mut p = ParamVector::new();
        mlp.init(&mut p, &mut rng, false).unwrap();
        let x = Tensor::new(vec![4, 3], rng.normal_vec(12)).unwrap();
        let y = Tensor::new(vec![4, 2], rng.normal_vec(8)).unwrap();
        let f = |v: &[f64]| {
            let mut q = p.clone();
            q.values_mut().copy_from_slice(v);
            let (l, gr) = gradient(&q, |g, b| {
                let xi = g.constant(x.clone())?;
                let yi = g.constant(y.clone())?;
                let out = mlp.forward(g, b, xi)?;
                g.mse(out, yi)
            })
            .unwrap();
            (l, gr.values().to_vec())
        };
        let err = grad_check(f, p.values(), 1e-4);
        assert!(err < 1e-4, "{err}");
    }
}
