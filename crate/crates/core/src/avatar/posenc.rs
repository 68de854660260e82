//! Sinusoidal positional encoding of 3-D points.

use crate::diffmath::{CustomOp, Graph, Tensor, Var};
use crate::{Error, Result};

pub fn encoded_width(freqs: usize) -> usize {
    3 + 6 * freqs
}

fn encode_row(p: &[f64], freqs: usize, out: &mut [f64]) {
    out[..3].copy_from_slice(p);
    let mut o = 3;
    for k in 0..freqs {
        let a = (1u64 << k) as f64;
        for &x in p {
            let (s, c) = (a * x).sin_cos();
            out[o] = s;
            out[o + 1] = c;
            o += 2;
        }
    }
}

/// `[p, sin(2^k p), cos(2^k p)]` for `k < freqs`, per row of `[n, 3]`.
pub fn posenc(g: &mut Graph, p: Var, freqs: usize) -> Result<Var> {
    let t = g.value(p);
    if t.cols() != 3 {
        return Err(Error::shape("posenc", format!("expected [n,3], got {:?}", t.shape())));
    }
    let w = encoded_width(freqs);
    let n = t.rows();
    let mut out = vec![0.0; n * w];
    for i in 0..n {
        encode_row(t.row_slice(i), freqs, &mut out[i * w..(i + 1) * w]);
    }
    let v = Tensor::new(vec![n, w], out)?;
    g.custom(Box::new(PosEnc { freqs }), &[p], v)
}

struct PosEnc {
    freqs: usize,
}

impl CustomOp for PosEnc {
    fn name(&self) -> &'static str {
        "posenc"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let p = inputs[0];
        let w = encoded_width(self.freqs);
        let mut d = vec![0.0; p.len()];
        for i in 0..p.rows() {
            let gr = &g.data()[i * w..(i + 1) * w];
            let or = &out.data()[i * w..(i + 1) * w];
            for k in 0..3 {
                d[i * 3 + k] = gr[k];
            }
            let mut o = 3;
            for f in 0..self.freqs {
                let a = (1u64 << f) as f64;
                for k in 0..3 {
                    // d sin = a cos, d cos = -a sin.
                    d[i * 3 + k] += a * (gr[o] * or[o + 1] - gr[o + 1] * or[o]);
                    o += 2;
                }
            }
        }
        Ok(vec![Some(Tensor::new(p.shape().to_vec(), d)?)])
    }
}
