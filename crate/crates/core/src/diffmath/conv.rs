//! Image-shaped operations over `[N, C, H, W]` tensors.

use super::graph::{CustomOp, Graph, Var};
use super::Tensor;
use crate::{Error, Result};

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

struct Conv2d {
    pad: usize,
}

/// Offsets `(dst_lo, dst_hi, shift)` so that `dst[i]` pairs with `src[i + shift]`.
#[inline]
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, ci, h, wd) = dims4("conv2d", x)?;
    let (co, wci, k, k2) = dims4("conv2d", w)?;
    if wci != ci || k != k2 || b.len() != co {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, kernel {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let plane = h * wd;
    let mut out = vec![0.0; n * co * plane];
    let xd = x.data();
    let wdat = w.data();
    for ni in 0..n {
        for o in 0..co {
            let op = &mut out[(ni * co + o) * plane..(ni * co + o + 1) * plane];
            op.fill(b.data()[o]);
            for c in 0..ci {
                let xp = &xd[(ni * ci + c) * plane..(ni * ci + c + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    let (ylo, yhi) = valid_range(h, dy);
                    for kx in 0..k {
                        let wv = wdat[((o * ci + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - pad as isize;
                        let (xlo, xhi) = valid_range(wd, dx);
                        for oy in ylo..yhi {
                            let iy = (oy as isize + dy) as usize;
                            let orow = &mut op[oy * wd + xlo..oy * wd + xhi];
                            let start = (iy * wd) as isize + xlo as isize + dx;
                            let irow = &xp[start as usize..start as usize + (xhi - xlo)];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, h, wd], out)
}

impl CustomOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, ci, h, wd) = dims4("conv2d", x)?;
        let (co, _, k, _) = dims4("conv2d", w)?;
        let plane = h * wd;
        let pad = self.pad as isize;
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gw = needs[1].then(|| vec![0.0; w.len()]);
        let mut gb = needs[2].then(|| vec![0.0; co]);
        for ni in 0..n {
            for o in 0..co {
                let gp = &g.data()[(ni * co + o) * plane..(ni * co + o + 1) * plane];
                if let Some(gb) = gb.as_mut() {
                    gb[o] += gp.iter().sum::<f64>();
                }
                for c in 0..ci {
                    let base = (ni * ci + c) * plane;
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (ylo, yhi) = valid_range(h, dy);
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let (xlo, xhi) = valid_range(wd, dx);
                            let widx = ((o * ci + c) * k + ky) * k + kx;
                            let wv = w.data()[widx];
                            let mut wacc = 0.0;
                            for oy in ylo..yhi {
                                let iy = (oy as isize + dy) as usize;
                                let grow = &gp[oy * wd + xlo..oy * wd + xhi];
                                let start = base + ((iy * wd) as isize + xlo as isize + dx) as usize;
                                let len = xhi - xlo;
                                if gw.is_some() {
                                    let xrow = &x.data()[start..start + len];
                                    for (gv, xv) in grow.iter().zip(xrow) {
                                        wacc += gv * xv;
                                    }
                                }
                                if let Some(gx) = gx.as_mut() {
                                    if wv != 0.0 {
                                        for (dst, gv) in gx[start..start + len].iter_mut().zip(grow) {
                                            *dst += wv * gv;
                                        }
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![
            gx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
            gw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
            gb.map(|d| Tensor::new(inputs[2].shape().to_vec(), d)).transpose()?,
        ])
    }
}

/// Same-padded stride-1 convolution with an odd square kernel.
pub fn conv2d(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let k = g.value(weight).shape().get(2).copied().unwrap_or(0);
    if k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel size {k} must be odd")));
    }
    let out = conv_forward(g.value(x), g.value(weight), g.value(bias), k / 2)?;
    g.custom(Box::new(Conv2d { pad: k / 2 }), &[x, weight, bias], out)
}

struct AvgPool2;

impl CustomOp for AvgPool2 {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, g: &Tensor, _n: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = dims4("avg_pool2", inputs[0])?;
        let (oh, ow) = (h / 2, w / 2);
        let mut gx = vec![0.0; inputs[0].len()];
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    let v = 0.25 * g.data()[p * oh * ow + y * ow + x];
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        gx[p * h * w + (2 * y + dy) * w + 2 * x + dx] += v;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), gx)?)])
    }
}

/// 2x2 average pooling (H and W must be even).
pub fn avg_pool2(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    let (n, c, h, w) = dims4("avg_pool2", t)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2", format!("odd size {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let s = |dy: usize, dx: usize| t.data()[p * h * w + (2 * y + dy) * w + 2 * xx + dx];
                out[p * oh * ow + y * ow + xx] = 0.25 * (s(0, 0) + s(0, 1) + s(1, 0) + s(1, 1));
            }
        }
    }
    let v = Tensor::new(vec![n, c, oh, ow], out)?;
    g.custom(Box::new(AvgPool2), &[x], v)
}

struct UpsampleNearest2;

impl CustomOp for UpsampleNearest2 {
    fn name(&self) -> &'static str {
        "upsample_nearest2"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, g: &Tensor, _n: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = dims4("upsample_nearest2", inputs[0])?;
        let mut gx = vec![0.0; inputs[0].len()];
        for p in 0..n * c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    gx[p * h * w + (y / 2) * w + x / 2] += g.data()[p * 4 * h * w + y * 2 * w + x];
                }
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), gx)?)])
    }
}

pub fn upsample_nearest2(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    let (n, c, h, w) = dims4("upsample_nearest2", t)?;
    let mut out = vec![0.0; n * c * 4 * h * w];
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[p * 4 * h * w + y * 2 * w + xx] = t.data()[p * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    let v = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
    g.custom(Box::new(UpsampleNearest2), &[x], v)
}

/// Linear interpolation taps for half-pixel-centred x2 upsampling.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct UpsampleBilinear2;

impl CustomOp for UpsampleBilinear2 {
    fn name(&self) -> &'static str {
        "upsample_bilinear2"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, g: &Tensor, _n: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = dims4("upsample_bilinear2", inputs[0])?;
        let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
        let mut gx = vec![0.0; inputs[0].len()];
        for p in 0..n * c {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = g.data()[p * 4 * h * w + oy * 2 * w + ox];
                    let base = p * h * w;
                    gx[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    gx[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                    gx[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                    gx[base + y1 * w + x1] += gv * fy * fx;
                }
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), gx)?)])
    }
}

/// Bilinear x2 upsampling with half-pixel centres and edge clamping.
pub fn upsample_bilinear2(g: &mut Graph, x: Var) -> Result<Var> {
    let v = upsample_bilinear2_value(g.value(x))?;
    g.custom(Box::new(UpsampleBilinear2), &[x], v)
}

pub fn upsample_bilinear2_value(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4("upsample_bilinear2", t)?;
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let mut out = vec![0.0; n * c * 4 * h * w];
    for p in 0..n * c {
        let s = &t.data()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                let bot = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                out[p * 4 * h * w + oy * 2 * w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![n, c, 2 * h, 2 * w], out)
}

struct ConcatChannels {
    ca: usize,
}

impl CustomOp for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (n, cb, h, w) = dims4("concat_channels", inputs[1])?;
        let plane = h * w;
        let ct = self.ca + cb;
        let mut ga = Vec::with_capacity(inputs[0].len());
        let mut gb = Vec::with_capacity(inputs[1].len());
        for ni in 0..n {
            let s = &g.data()[ni * ct * plane..(ni + 1) * ct * plane];
            ga.extend_from_slice(&s[..self.ca * plane]);
            gb.extend_from_slice(&s[self.ca * plane..]);
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(inputs[0].shape().to_vec(), ga)).transpose()?,
            needs[1].then(|| Tensor::new(inputs[1].shape().to_vec(), gb)).transpose()?,
        ])
    }
}

pub fn concat_channels(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    let (n, ca, h, w) = dims4("concat_channels", ta)?;
    let (nb, cb, hb, wb) = dims4("concat_channels", tb)?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(ta.len() + tb.len());
    for ni in 0..n {
        out.extend_from_slice(&ta.data()[ni * ca * plane..(ni + 1) * ca * plane]);
        out.extend_from_slice(&tb.data()[ni * cb * plane..(ni + 1) * cb * plane]);
    }
    let v = Tensor::new(vec![n, ca + cb, h, w], out)?;
    g.custom(Box::new(ConcatChannels { ca }), &[a, b], v)
}

struct ChannelBias;

impl CustomOp for ChannelBias {
    fn name(&self) -> &'static str {
        "channel_bias"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = dims4("channel_bias", inputs[0])?;
        let plane = h * w;
        let gb = needs[1].then(|| {
            (0..n * c)
                .map(|p| g.data()[p * plane..(p + 1) * plane].iter().sum())
                .collect::<Vec<f64>>()
        });
        Ok(vec![
            needs[0].then(|| g.clone()),
            gb.map(|d| Tensor::new(inputs[1].shape().to_vec(), d)).transpose()?,
        ])
    }
}

/// `x[n,c,:,:] + b[n,c]`: per-sample, per-channel shift.
pub fn channel_bias(g: &mut Graph, x: Var, b: Var) -> Result<Var> {
    let (tx, tb) = (g.value(x), g.value(b));
    let (n, c, h, w) = dims4("channel_bias", tx)?;
    if tb.len() != n * c {
        return Err(Error::shape(
            "channel_bias",
            format!("{:?} vs bias {:?}", tx.shape(), tb.shape()),
        ));
    }
    let plane = h * w;
    let mut out = tx.clone();
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let bv = tb.data()[p];
        for v in chunk {
            *v += bv;
        }
    }
    g.custom(Box::new(ChannelBias), &[x, b], out)
}

struct ChannelScale;

impl CustomOp for ChannelScale {
    fn name(&self) -> &'static str {
        "channel_scale"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, s) = (inputs[0], inputs[1]);
        let plane = x.len() / s.len().max(1);
        let gx = needs[0].then(|| {
            let mut d = g.clone();
            for (p, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
                let sv = s.data()[p];
                for v in chunk {
                    *v *= sv;
                }
            }
            d
        });
        let gs = needs[1].then(|| {
            (0..s.len())
                .map(|p| {
                    let r = p * plane..(p + 1) * plane;
                    g.data()[r.clone()].iter().zip(&x.data()[r]).map(|(a, b)| a * b).sum()
                })
                .collect::<Vec<f64>>()
        });
        Ok(vec![gx, gs.map(|d| Tensor::new(s.shape().to_vec(), d)).transpose()?])
    }
}

/// `x[n,c,:,:] * s[n,c]`: per-sample, per-channel gain.
pub fn channel_scale(g: &mut Graph, x: Var, s: Var) -> Result<Var> {
    let (tx, ts) = (g.value(x), g.value(s));
    let (n, c, h, w) = dims4("channel_scale", tx)?;
    if ts.len() != n * c {
        return Err(Error::shape(
            "channel_scale",
            format!("{:?} vs scale {:?}", tx.shape(), ts.shape()),
        ));
    }
    let plane = h * w;
    let mut out = tx.clone();
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let sv = ts.data()[p];
        for v in chunk {
            *v *= sv;
        }
    }
    g.custom(Box::new(ChannelScale), &[x, s], out)
}
