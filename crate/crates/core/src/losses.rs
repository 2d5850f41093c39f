//! Training losses (L1 + SSIM) and evaluation metrics.
//!
//! Volumes are passed as flat `(F, H, W)` row-major slices; `y` is the
//! reference and `yhat` the prediction. Backward functions return the
//! gradient with respect to `yhat`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

fn check_pair(y: &[f64], yhat: &[f64], dims: [usize; 3]) -> Result<()> {
    let n: usize = dims.iter().product();
    if y.len() != n || yhat.len() != n {
        return Err(Error::Shape(format!(
            "loss inputs have {} and {} values, dims {dims:?} need {n}",
            y.len(),
            yhat.len()
        )));
    }
    if n == 0 {
        return Err(Error::ZeroDimension(dims.to_vec()));
    }
    Ok(())
}

pub fn l1_loss(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, [1, 1, y.len()])?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Subgradient with `sign(0) = 0`.
pub fn l1_backward(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
    check_pair(y, yhat, [1, 1, y.len()])?;
    let n = y.len() as f64;
    Ok(y.iter()
        .zip(yhat)
        .map(|(a, b)| {
            let d = b - a;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Window length used on an `h × w` slice: the configured length,
    /// shrunk to fit and kept odd.
    pub fn window_for(&self, h: usize, w: usize) -> usize {
        let n = self.window.min(h).min(w).max(1);
        if n % 2 == 0 {
            n - 1
        } else {
            n
        }
    }

    fn taps(&self, n: usize) -> Vec<f64> {
        let c = (n / 2) as f64;
        let mut g: Vec<f64> = (0..n)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let z: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= z);
        g
    }
}

/// Valid-region separable filter of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|t| g[t] * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|t| g[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(map: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let m = map[y * ow + x];
            for t in 0..n {
                rows[(y + t) * ow + x] += g[t] * m;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let r = rows[y * ow + x];
            for t in 0..n {
                out[y * w + x + t] += g[t] * r;
            }
        }
    }
    out
}

struct SliceStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn slice_stats(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64]) -> SliceStats {
    let sq = |a: &[f64]| a.iter().map(|v| v * v).collect::<Vec<_>>();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    SliceStats {
        mx: filter_valid(x, h, w, g),
        my: filter_valid(y, h, w, g),
        exx: filter_valid(&sq(x), h, w, g),
        eyy: filter_valid(&sq(y), h, w, g),
        exy: filter_valid(&xy, h, w, g),
    }
}

fn ssim_impl(
    y: &[f64],
    yhat: &[f64],
    dims: [usize; 3],
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    check_pair(y, yhat, dims)?;
    let [nf, h, w] = dims;
    let n = cfg.window_for(h, w);
    let g = cfg.taps(n);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let plane = h * w;
    let npos = ((h - n + 1) * (w - n + 1)) as f64;
    let norm = 1.0 / (npos * nf as f64);
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; y.len()] } else { Vec::new() };
    for f in 0..nf {
        let xs = &y[f * plane..(f + 1) * plane];
        let ys = &yhat[f * plane..(f + 1) * plane];
        let st = slice_stats(xs, ys, h, w, &g);
        let m = st.mx.len();
        let (mut dmu, mut deyy, mut dexy) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut acc = 0.0;
        for p in 0..m {
            let (mx, my) = (st.mx[p], st.my[p]);
            let sxx = st.exx[p] - mx * mx;
            let syy = st.eyy[p] - my * my;
            let sxy = st.exy[p] - mx * my;
            let a1 = 2.0 * mx * my + c1;
            let a2 = 2.0 * sxy + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = sxx + syy + c2;
            let s = (a1 * a2) / (b1 * b2);
            acc += s;
            if want_grad {
                dmu[p] = norm
                    * s
                    * (2.0 * mx / a1 - 2.0 * mx / a2 - 2.0 * my / b1 + 2.0 * my / b2);
                deyy[p] = -norm * s / b2;
                dexy[p] = norm * 2.0 * s / a2;
            }
        }
        total += acc;
        if want_grad {
            let gm = filter_valid_adjoint(&dmu, h, w, &g);
            let ge = filter_valid_adjoint(&deyy, h, w, &g);
            let gx = filter_valid_adjoint(&dexy, h, w, &g);
            let out = &mut grad[f * plane..(f + 1) * plane];
            for q in 0..plane {
                out[q] = gm[q] + 2.0 * ys[q] * ge[q] + xs[q] * gx[q];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean SSIM over lateral `(y, x)` slices.
pub fn ssim(y: &[f64], yhat: &[f64], dims: [usize; 3], cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_impl(y, yhat, dims, cfg, false)?.0)
}

/// SSIM value and its gradient with respect to `yhat`.
pub fn ssim_with_grad(
    y: &[f64],
    yhat: &[f64],
    dims: [usize; 3],
    cfg: &SsimConfig,
) -> Result<(f64, Vec<f64>)> {
    ssim_impl(y, yhat, dims, cfg, true)
}

pub fn ssim_loss(y: &[f64], yhat: &[f64], dims: [usize; 3], cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim(y, yhat, dims, cfg)?)
}

/// `l1 + (1 − ssim)` and its gradient with respect to `yhat`.
pub fn total_loss_with_grad(
    y: &[f64],
    yhat: &[f64],
    dims: [usize; 3],
    cfg: &SsimConfig,
) -> Result<(f64, Vec<f64>)> {
    let l1 = l1_loss(y, yhat)?;
    let mut g = l1_backward(y, yhat)?;
    let (s, gs) = ssim_with_grad(y, yhat, dims, cfg)?;
    for (a, b) in g.iter_mut().zip(gs) {
        *a -= b;
    }
    Ok((l1 + (1.0 - s), g))
}

pub fn total_loss(y: &[f64], yhat: &[f64], dims: [usize; 3], cfg: &SsimConfig) -> Result<f64> {
    Ok(l1_loss(y, yhat)? + ssim_loss(y, yhat, dims, cfg)?)
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, [1, 1, y.len()])?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(y: &[f64], yhat: &[f64], data_range: f64) -> Result<f64> {
    let e = mse(y, yhat)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * data_range.log10() - 10.0 * e.log10())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

impl Metrics {
    pub fn compute(y: &[f64], yhat: &[f64], dims: [usize; 3]) -> Result<Self> {
        let cfg = SsimConfig::default();
        Ok(Self {
            psnr: psnr(y, yhat, cfg.data_range)?,
            ssim: ssim(y, yhat, dims, &cfg)?,
            l1: l1_loss(y, yhat)?,
        })
    }

    /// `{"psnr": float | "inf", "ssim": float, "l1": float}`
    pub fn to_json(&self) -> Value {
        let psnr = if self.psnr.is_infinite() {
            json!("inf")
        } else {
            json!(self.psnr)
        };
        json!({"psnr": psnr, "ssim": self.ssim, "l1": self.l1})
    }
}
