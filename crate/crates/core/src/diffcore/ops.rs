//! Forward/backward kernels shared by every learnable layer.
//!
//! Feature tensors use the `(F, C, h, W)` layout: sections, channels, height,
//! width, row-major. Backward functions return input cotangents and write
//! parameter cotangents into caller-provided accumulators.

use super::NdArray;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

pub fn dims4(x: &NdArray) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [f, c, h, w] => Ok((f, c, h, w)),
        _ => Err(Error::Shape(format!(
            "expected an (F, C, h, W) tensor, got {:?}",
            x.shape()
        ))),
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n-2`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Per-axis neighbor table for a radius-1 stencil with reflect padding.
fn neighbors(n: usize) -> Vec<[usize; 3]> {
    (0..n as isize)
        .map(|i| [reflect(i - 1, n), i as usize, reflect(i + 1, n)])
        .collect()
}

// ---------------------------------------------------------------------------
// elementwise

pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let t = (K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus, for bias initialization.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

// ---------------------------------------------------------------------------
// pointwise (1x1x1) channel mixing

/// `y[f, o, y, x] = b[o] + Σ_i w[o, i] · x[f, i, y, x]`
pub fn pointwise(x: &NdArray, w: &NdArray, b: &NdArray) -> Result<NdArray> {
    let (nf, ci, nh, nw) = dims4(x)?;
    let co = w.shape()[0];
    w.ensure_shape(&[co, ci], "pointwise weight")?;
    b.ensure_shape(&[co], "pointwise bias")?;
    let plane = nh * nw;
    let mut out = NdArray::zeros(&[nf, co, nh, nw]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for f in 0..nf {
        for o in 0..co {
            let dst = &mut od[(f * co + o) * plane..(f * co + o + 1) * plane];
            dst.fill(bd[o]);
            for i in 0..ci {
                let wv = wd[o * ci + i];
                if wv == 0.0 {
                    continue;
                }
                let src = &xd[(f * ci + i) * plane..(f * ci + i + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    Ok(out)
}

/// Returns dx; accumulates into `dw`, `db`.
pub fn pointwise_backward(
    x: &NdArray,
    w: &NdArray,
    dy: &NdArray,
    dw: &mut NdArray,
    db: &mut NdArray,
) -> Result<NdArray> {
    let (nf, ci, nh, nw) = dims4(x)?;
    let co = w.shape()[0];
    dy.ensure_shape(&[nf, co, nh, nw], "pointwise cotangent")?;
    let plane = nh * nw;
    let mut dx = NdArray::zeros(x.shape());
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    for f in 0..nf {
        for o in 0..co {
            let g = &gd[(f * co + o) * plane..(f * co + o + 1) * plane];
            dbd[o] += g.iter().sum::<f64>();
            for i in 0..ci {
                let src = &xd[(f * ci + i) * plane..(f * ci + i + 1) * plane];
                dwd[o * ci + i] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                let wv = wd[o * ci + i];
                let dst = &mut dxd[(f * ci + i) * plane..(f * ci + i + 1) * plane];
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += wv * gv;
                }
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// dense 3x3x3 convolution, reflect padding

struct Stencil {
    nf: Vec<[usize; 3]>,
    nh: Vec<[usize; 3]>,
    nw: Vec<[usize; 3]>,
}

impl Stencil {
    fn new(f: usize, h: usize, w: usize) -> Self {
        Self {
            nf: neighbors(f),
            nh: neighbors(h),
            nw: neighbors(w),
        }
    }
}

/// Weight shape `[Co, Ci, 3, 3, 3]`, taps ordered (df, dy, dx).
pub fn conv3d(x: &NdArray, w: &NdArray, b: &NdArray) -> Result<NdArray> {
    let (nf, ci, nh, nw) = dims4(x)?;
    let co = w.shape()[0];
    w.ensure_shape(&[co, ci, 3, 3, 3], "conv3d weight")?;
    b.ensure_shape(&[co], "conv3d bias")?;
    let st = Stencil::new(nf, nh, nw);
    let k = ci * 27;
    let mut patch = vec![0.0; k];
    let mut out = NdArray::zeros(&[nf, co, nh, nw]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for f in 0..nf {
        for y in 0..nh {
            for xx in 0..nw {
                gather(xd, &st, (ci, nh, nw), (f, y, xx), &mut patch);
                for o in 0..co {
                    let wr = &wd[o * k..(o + 1) * k];
                    let acc: f64 = wr.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    od[((f * co + o) * nh + y) * nw + xx] = bd[o] + acc;
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn gather(
    xd: &[f64],
    st: &Stencil,
    (ci, nh, nw): (usize, usize, usize),
    (f, y, x): (usize, usize, usize),
    patch: &mut [f64],
) {
    let mut t = 0;
    for i in 0..ci {
        for &ff in &st.nf[f] {
            let base = (ff * ci + i) * nh;
            for &yy in &st.nh[y] {
                let row = (base + yy) * nw;
                for &xx in &st.nw[x] {
                    patch[t] = xd[row + xx];
                    t += 1;
                }
            }
        }
    }
}

#[inline]
fn scatter(
    dxd: &mut [f64],
    st: &Stencil,
    (ci, nh, nw): (usize, usize, usize),
    (f, y, x): (usize, usize, usize),
    dpatch: &[f64],
) {
    let mut t = 0;
    for i in 0..ci {
        for &ff in &st.nf[f] {
            let base = (ff * ci + i) * nh;
            for &yy in &st.nh[y] {
                let row = (base + yy) * nw;
                for &xx in &st.nw[x] {
                    dxd[row + xx] += dpatch[t];
                    t += 1;
                }
            }
        }
    }
}

pub fn conv3d_backward(
    x: &NdArray,
    w: &NdArray,
    dy: &NdArray,
    dw: &mut NdArray,
    db: &mut NdArray,
) -> Result<NdArray> {
    let (nf, ci, nh, nw) = dims4(x)?;
    let co = w.shape()[0];
    dy.ensure_shape(&[nf, co, nh, nw], "conv3d cotangent")?;
    let st = Stencil::new(nf, nh, nw);
    let k = ci * 27;
    let mut patch = vec![0.0; k];
    let mut dpatch = vec![0.0; k];
    let mut dx = NdArray::zeros(x.shape());
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    let dxd = dx.data_mut();
    for f in 0..nf {
        for y in 0..nh {
            for xx in 0..nw {
                gather(xd, &st, (ci, nh, nw), (f, y, xx), &mut patch);
                dpatch.fill(0.0);
                for o in 0..co {
                    let g = gd[((f * co + o) * nh + y) * nw + xx];
                    if g == 0.0 {
                        continue;
                    }
                    dbd[o] += g;
                    let wr = &wd[o * k..(o + 1) * k];
                    let dwr = &mut dwd[o * k..(o + 1) * k];
                    for t in 0..k {
                        dwr[t] += g * patch[t];
                        dpatch[t] += g * wr[t];
                    }
                }
                scatter(dxd, &st, (ci, nh, nw), (f, y, xx), &dpatch);
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// depthwise 3x3x3 convolution, reflect padding

/// Weight shape `[C, 3, 3, 3]`.
pub fn depthwise_conv3d(x: &NdArray, w: &NdArray, b: &NdArray) -> Result<NdArray> {
    let (nf, c, nh, nw) = dims4(x)?;
    w.ensure_shape(&[c, 3, 3, 3], "depthwise weight")?;
    b.ensure_shape(&[c], "depthwise bias")?;
    let st = Stencil::new(nf, nh, nw);
    let mut out = NdArray::zeros(x.shape());
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for f in 0..nf {
        for ch in 0..c {
            let wr = &wd[ch * 27..(ch + 1) * 27];
            for y in 0..nh {
                for xx in 0..nw {
                    let mut acc = bd[ch];
                    let mut t = 0;
                    for &ff in &st.nf[f] {
                        for &yy in &st.nh[y] {
                            let row = ((ff * c + ch) * nh + yy) * nw;
                            for &x2 in &st.nw[xx] {
                                acc += wr[t] * xd[row + x2];
                                t += 1;
                            }
                        }
                    }
                    od[((f * c + ch) * nh + y) * nw + xx] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv3d_backward(
    x: &NdArray,
    w: &NdArray,
    dy: &NdArray,
    dw: &mut NdArray,
    db: &mut NdArray,
) -> Result<NdArray> {
    let (nf, c, nh, nw) = dims4(x)?;
    dy.ensure_shape(x.shape(), "depthwise cotangent")?;
    let st = Stencil::new(nf, nh, nw);
    let mut dx = NdArray::zeros(x.shape());
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    let dxd = dx.data_mut();
    for f in 0..nf {
        for ch in 0..c {
            for y in 0..nh {
                for xx in 0..nw {
                    let g = gd[((f * c + ch) * nh + y) * nw + xx];
                    if g == 0.0 {
                        continue;
                    }
                    dbd[ch] += g;
                    let mut t = 0;
                    for &ff in &st.nf[f] {
                        for &yy in &st.nh[y] {
                            let row = ((ff * c + ch) * nh + yy) * nw;
                            for &x2 in &st.nw[xx] {
                                dwd[ch * 27 + t] += g * xd[row + x2];
                                dxd[row + x2] += g * wd[ch * 27 + t];
                                t += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// channel LayerNorm (no affine)

/// Normalizes over the channel axis at every voxel. Returns the output and
/// the per-voxel inverse standard deviation needed by the backward pass.
pub fn layer_norm_channels(x: &NdArray) -> Result<(NdArray, Vec<f64>)> {
    let (nf, c, nh, nw) = dims4(x)?;
    let plane = nh * nw;
    let mut out = NdArray::zeros(x.shape());
    let mut inv_std = vec![0.0; nf * plane];
    let xd = x.data();
    let od = out.data_mut();
    for f in 0..nf {
        for p in 0..plane {
            let at = |ch: usize| (f * c + ch) * plane + p;
            let mean = (0..c).map(|ch| xd[at(ch)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (xd[at(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[f * plane + p] = is;
            for ch in 0..c {
                od[at(ch)] = (xd[at(ch)] - mean) * is;
            }
        }
    }
    Ok((out, inv_std))
}

/// Backward from the normalized output `xhat` and saved `inv_std`.
pub fn layer_norm_channels_backward(
    xhat: &NdArray,
    inv_std: &[f64],
    dy: &NdArray,
) -> Result<NdArray> {
    let (nf, c, nh, nw) = dims4(xhat)?;
    dy.ensure_shape(xhat.shape(), "layer norm cotangent")?;
    let plane = nh * nw;
    let mut dx = NdArray::zeros(xhat.shape());
    let (xh, gd) = (xhat.data(), dy.data());
    let dxd = dx.data_mut();
    let cf = c as f64;
    for f in 0..nf {
        for p in 0..plane {
            let at = |ch: usize| (f * c + ch) * plane + p;
            let mg = (0..c).map(|ch| gd[at(ch)]).sum::<f64>() / cf;
            let mgx = (0..c).map(|ch| gd[at(ch)] * xh[at(ch)]).sum::<f64>() / cf;
            let is = inv_std[f * plane + p];
            for ch in 0..c {
                dxd[at(ch)] = is * (gd[at(ch)] - mg - xh[at(ch)] * mgx);
            }
        }
    }
    Ok(dx)
}
