//! Binary-entropy regulariser on accumulated opacity.

use crate::diffmath::{CustomOp, Graph, Tensor, Var};
use crate::{Error, Result};

const TOL: f64 = 1e-6;
/// Opacity is clamped this far inside `(0, 1)` when differentiating.
const GRAD_CLAMP: f64 = 1e-6;

fn h(w: f64) -> f64 {
    let term = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.log2() };
    term(w) + term(1.0 - w)
}

/// `H(w) = -w log2 w - (1 - w) log2 (1 - w)`, with `0 log 0 = 0`.
pub fn entropy_reg(omega: f64) -> Result<f64> {
    if !(-TOL..=1.0 + TOL).contains(&omega) {
        return Err(Error::invalid(format!("opacity {omega} outside [0, 1]")));
    }
    Ok(h(omega.clamp(0.0, 1.0)))
}

/// Mean entropy over every element of `omega`.
pub fn entropy_mean(g: &mut Graph, omega: Var) -> Result<Var> {
    let t = g.value(omega);
    if let Some(w) = t.data().iter().find(|w| !(-TOL..=1.0 + TOL).contains(*w)) {
        return Err(Error::invalid(format!("opacity {w} outside [0, 1]")));
    }
    let n = t.len().max(1) as f64;
    let v = t.data().iter().map(|w| h(w.clamp(0.0, 1.0))).sum::<f64>() / n;
    g.custom(Box::new(EntropyOp), &[omega], Tensor::scalar(v))
}

struct EntropyOp;

impl CustomOp for EntropyOp {
    fn name(&self) -> &'static str {
        "entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let k = grad.data()[0] / x.len().max(1) as f64;
        let d = x.map(|w| {
            let w = w.clamp(GRAD_CLAMP, 1.0 - GRAD_CLAMP);
            k * ((1.0 - w) / w).log2()
        });
        Ok(vec![Some(d)])
    }
}
