//! Diagonal state-space kernels.
//!
//! Continuous dynamics `h' = A h + B x, y = C h` with diagonal `A`, discretized
//! by zero-order hold. The LTI case is exposed both as a recurrence and as a
//! causal convolution; the selective case recomputes `Δ`, `B`, `C` from the
//! input at every step.

use rand::Rng;
use rayon::prelude::*;

use crate::diffcore::{
    ops::{sigmoid, softplus, softplus_inv},
    NdArray, ParamStore,
};
use crate::error::{Error, Result};

/// Below this `|Δ·a|` the first-order expansion `B̄ = Δ·B` is used.
pub const ZOH_SMALL: f64 = 1e-8;

/// ZOH for one diagonal entry: `Ā = exp(Δa)`, `B̄ = (exp(Δa) − 1)/a · B`.
pub fn discretize_zoh(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ZOH step must be positive, got {delta}"
        )));
    }
    let (abar, phi) = zoh_coeffs(a, delta);
    Ok((abar, phi * b))
}

/// `(exp(Δa), (exp(Δa) − 1)/a)`.
#[inline]
fn zoh_coeffs(a: f64, delta: f64) -> (f64, f64) {
    let da = delta * a;
    if da.abs() < ZOH_SMALL {
        (1.0 + da, delta)
    } else {
        let em1 = da.exp_m1();
        (em1 + 1.0, em1 / a)
    }
}

/// Partial derivatives of `φ = (exp(Δa) − 1)/a` w.r.t. `Δ` and `a`.
#[inline]
fn zoh_phi_grads(a: f64, delta: f64, abar: f64, phi: f64) -> (f64, f64) {
    if (delta * a).abs() < ZOH_SMALL {
        (1.0, 0.5 * delta * delta)
    } else {
        (abar, (delta * abar - phi) / a)
    }
}

// ---------------------------------------------------------------------------
// LTI

fn check_state_dims(abar: &[f64], bbar: &[f64], c: &[f64]) -> Result<usize> {
    let n = abar.len();
    if n == 0 || bbar.len() != n || c.len() != n {
        return Err(Error::Shape(format!(
            "state vectors have lengths {}, {}, {}",
            abar.len(),
            bbar.len(),
            c.len()
        )));
    }
    Ok(n)
}

/// `h_t = Ā h_{t−1} + B̄ x_t; y_t = C·h_t`, single channel, diagonal state.
pub fn lti_scan(
    abar: &[f64],
    bbar: &[f64],
    c: &[f64],
    x: &[f64],
    h0: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = check_state_dims(abar, bbar, c)?;
    let mut h = match h0 {
        Some(h0) if h0.len() != n => {
            return Err(Error::Shape(format!(
                "initial state has length {}, expected {n}",
                h0.len()
            )))
        }
        Some(h0) => h0.to_vec(),
        None => vec![0.0; n],
    };
    Ok(x
        .iter()
        .map(|&xt| {
            let mut y = 0.0;
            for i in 0..n {
                h[i] = abar[i] * h[i] + bbar[i] * xt;
                y += c[i] * h[i];
            }
            y
        })
        .collect())
}

/// `K = (C·B̄, C·Ā·B̄, …, C·Ā^{L−1}·B̄)`.
pub fn lti_kernel(abar: &[f64], bbar: &[f64], c: &[f64], len: usize) -> Result<Vec<f64>> {
    let n = check_state_dims(abar, bbar, c)?;
    if len < 1 {
        return Err(Error::InvalidArgument("kernel length must be >= 1".into()));
    }
    let mut pow = vec![1.0; n];
    Ok((0..len)
        .map(|_| {
            let k = (0..n).map(|i| c[i] * pow[i] * bbar[i]).sum();
            for i in 0..n {
                pow[i] *= abar[i];
            }
            k
        })
        .collect())
}

/// Causal convolution `y_t = Σ_{j≤t} K_j x_{t−j}`; kernel taps past its end
/// count as zero.
pub fn conv_apply(x: &[f64], k: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            (0..=t.min(k.len().saturating_sub(1)))
                .map(|j| k[j] * x[t - j])
                .sum()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// time-varying core

/// Time-varying inputs of the core scan. Shapes: `x`, `delta` `[L, D]`;
/// `a` `[D, N]`; `b`, `c` `[L, N]`.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a> {
    pub x: &'a NdArray,
    pub delta: &'a NdArray,
    pub a: &'a NdArray,
    pub b: &'a NdArray,
    pub c: &'a NdArray,
}

impl ScanInputs<'_> {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let (l, d) = match *self.x.shape() {
            [l, d] => (l, d),
            _ => return Err(Error::Shape(format!("scan input {:?}", self.x.shape()))),
        };
        let n = match *self.a.shape() {
            [ad, n] if ad == d => n,
            _ => return Err(Error::Shape(format!("state matrix {:?}", self.a.shape()))),
        };
        self.delta.ensure_shape(&[l, d], "scan delta")?;
        self.b.ensure_shape(&[l, n], "scan B")?;
        self.c.ensure_shape(&[l, n], "scan C")?;
        Ok((l, d, n))
    }
}

/// Hidden states `[L, D, N]` saved by the forward pass.
#[derive(Clone, Debug)]
pub struct CoreSaved {
    pub h: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CoreGrads {
    pub dx: NdArray,
    pub ddelta: NdArray,
    pub da: NdArray,
    pub db: NdArray,
    pub dc: NdArray,
}

pub fn scan_core(inp: ScanInputs<'_>) -> Result<(NdArray, CoreSaved)> {
    let (l, d, n) = inp.dims()?;
    let (x, dl, a, b, c) = (
        inp.x.data(),
        inp.delta.data(),
        inp.a.data(),
        inp.b.data(),
        inp.c.data(),
    );
    let mut h = vec![0.0; l * d * n];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let (prev, cur) = if t == 0 {
            (None, &mut h[..d * n])
        } else {
            let (p, c) = h.split_at_mut(t * d * n);
            (Some(&p[(t - 1) * d * n..]), &mut c[..d * n])
        };
        for ch in 0..d {
            let dt = dl[t * d + ch];
            let xt = x[t * d + ch];
            let mut acc = 0.0;
            for s in 0..n {
                let (abar, phi) = zoh_coeffs(a[ch * n + s], dt);
                let hp = prev.map_or(0.0, |p| p[ch * n + s]);
                let hv = abar * hp + phi * b[t * n + s] * xt;
                cur[ch * n + s] = hv;
                acc += c[t * n + s] * hv;
            }
            y[t * d + ch] = acc;
        }
        if !y[t * d..(t + 1) * d].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                step: t,
                context: "selective scan output".into(),
            });
        }
    }
    Ok((NdArray::new(&[l, d], y)?, CoreSaved { h }))
}

/// Exact VJP of [`scan_core`] by reverse-time recurrence over saved states.
pub fn scan_core_backward(
    inp: ScanInputs<'_>,
    saved: &CoreSaved,
    dy: &NdArray,
) -> Result<CoreGrads> {
    let (l, d, n) = inp.dims()?;
    dy.ensure_shape(&[l, d], "scan cotangent")?;
    if saved.h.len() != l * d * n {
        return Err(Error::MissingSaved(format!(
            "expected {} hidden states, have {}",
            l * d * n,
            saved.h.len()
        )));
    }
    let (x, dl, a, b, c) = (
        inp.x.data(),
        inp.delta.data(),
        inp.a.data(),
        inp.b.data(),
        inp.c.data(),
    );
    let g = dy.data();
    let h = &saved.h;
    let mut dx = vec![0.0; l * d];
    let mut ddelta = vec![0.0; l * d];
    let mut da = vec![0.0; d * n];
    let mut db = vec![0.0; l * n];
    let mut dc = vec![0.0; l * n];
    let mut carry = vec![0.0; d * n];
    for t in (0..l).rev() {
        for ch in 0..d {
            let dt = dl[t * d + ch];
            let xt = x[t * d + ch];
            let gy = g[t * d + ch];
            for s in 0..n {
                let av = a[ch * n + s];
                let (abar, phi) = zoh_coeffs(av, dt);
                let hi = (t * d + ch) * n + s;
                let hp = if t == 0 { 0.0 } else { h[hi - d * n] };
                let gh = gy * c[t * n + s] + carry[ch * n + s];
                dc[t * n + s] += gy * h[hi];
                let bt = b[t * n + s];
                let d_abar = gh * hp;
                let d_phi = gh * bt * xt;
                dx[t * d + ch] += gh * phi * bt;
                db[t * n + s] += gh * phi * xt;
                let (dphi_ddt, dphi_da) = zoh_phi_grads(av, dt, abar, phi);
                ddelta[t * d + ch] += d_abar * abar * av + d_phi * dphi_ddt;
                da[ch * n + s] += d_abar * abar * dt + d_phi * dphi_da;
                carry[ch * n + s] = gh * abar;
            }
        }
    }
    Ok(CoreGrads {
        dx: NdArray::new(&[l, d], dx)?,
        ddelta: NdArray::new(&[l, d], ddelta)?,
        da: NdArray::new(&[d, n], da)?,
        db: NdArray::new(&[l, n], db)?,
        dc: NdArray::new(&[l, n], dc)?,
    })
}

/// Element of the first-order linear recurrence `h ↦ a·h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElem {
    pub a: f64,
    pub b: f64,
}

impl ScanElem {
    pub const IDENTITY: ScanElem = ScanElem { a: 1.0, b: 0.0 };

    /// `self ∘ earlier`: apply `earlier`, then `self`.
    #[inline]
    pub fn after(self, earlier: ScanElem) -> ScanElem {
        ScanElem {
            a: self.a * earlier.a,
            b: self.a * earlier.b + self.b,
        }
    }

    #[inline]
    pub fn apply(self, h: f64) -> f64 {
        self.a * h + self.b
    }
}

/// Blockwise associative evaluation of [`scan_core`]: local prefixes inside
/// each block (blocks in parallel), a sequential pass over block carries,
/// then a fix-up.
pub fn scan_core_parallel(inp: ScanInputs<'_>, block: usize) -> Result<NdArray> {
    if block < 1 {
        return Err(Error::InvalidArgument("block length must be >= 1".into()));
    }
    let (l, d, n) = inp.dims()?;
    let (x, dl, a, b, c) = (
        inp.x.data(),
        inp.delta.data(),
        inp.a.data(),
        inp.b.data(),
        inp.c.data(),
    );
    let width = d * n;
    // local prefixes, [L, D, N]
    let mut local = vec![ScanElem::IDENTITY; l * width];
    local
        .par_chunks_mut(block * width)
        .enumerate()
        .for_each(|(k, chunk)| {
            let t0 = k * block;
            let mut run = vec![ScanElem::IDENTITY; width];
            for (i, row) in chunk.chunks_mut(width).enumerate() {
                let t = t0 + i;
                for ch in 0..d {
                    let dt = dl[t * d + ch];
                    let xt = x[t * d + ch];
                    for s in 0..n {
                        let (abar, phi) = zoh_coeffs(a[ch * n + s], dt);
                        let e = ScanElem {
                            a: abar,
                            b: phi * b[t * n + s] * xt,
                        };
                        let j = ch * n + s;
                        run[j] = e.after(run[j]);
                        row[j] = run[j];
                    }
                }
            }
        });
    // carries into each block
    let n_blocks = l.div_ceil(block);
    let mut carries = vec![vec![0.0; width]; n_blocks];
    for k in 1..n_blocks {
        let last = &local[((k * block) - 1) * width..k * block * width];
        let prev = carries[k - 1].clone();
        carries[k] = (0..width).map(|j| last[j].apply(prev[j])).collect();
    }
    let mut y = vec![0.0; l * d];
    y.par_chunks_mut(block * d)
        .enumerate()
        .for_each(|(k, yc)| {
            let carry = &carries[k];
            for (i, yrow) in yc.chunks_mut(d).enumerate() {
                let t = k * block + i;
                for (ch, yv) in yrow.iter_mut().enumerate() {
                    *yv = (0..n)
                        .map(|s| c[t * n + s] * local[t * width + ch * n + s].apply(carry[ch * n + s]))
                        .sum();
                }
            }
        });
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: i / d,
            context: "parallel selective scan output".into(),
        });
    }
    NdArray::new(&[l, d], y)
}

// ---------------------------------------------------------------------------
// selective scan with input-dependent projections

/// Parameters of one selective scan over `D` channels with `N` states each.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `A = −exp(log_a)`, `[D, N]`.
    pub log_a: NdArray,
    /// `[D, D]`
    pub w_delta: NdArray,
    /// `[D]`
    pub delta_bias: NdArray,
    /// `[N, D]`
    pub w_b: NdArray,
    /// `[N, D]`
    pub w_c: NdArray,
}

pub const SSM_PARAM_NAMES: [&str; 5] = ["log_a", "w_delta", "delta_bias", "w_b", "w_c"];

impl SsmParams {
    /// `A_dn = −(n+1)`, `Δ` bias so that `softplus(bias)` is log-uniform in
    /// `[0.01, 0.1]`, small uniform projection weights.
    pub fn init(channels: usize, states: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (channels as f64).sqrt();
        Self {
            log_a: NdArray::from_fn(&[channels, states], |i| ((i % states) as f64 + 1.0).ln()),
            w_delta: NdArray::from_fn(&[channels, channels], |_| {
                0.1 * scale * rng.random_range(-1.0..1.0)
            }),
            delta_bias: NdArray::from_fn(&[channels], |_| {
                let dt = (rng.random_range(0.01f64.ln()..0.1f64.ln())).exp();
                softplus_inv(dt)
            }),
            w_b: NdArray::from_fn(&[states, channels], |_| scale * rng.random_range(-1.0..1.0)),
            w_c: NdArray::from_fn(&[states, channels], |_| scale * rng.random_range(-1.0..1.0)),
        }
    }

    pub fn zeros(channels: usize, states: usize) -> Self {
        Self {
            log_a: NdArray::zeros(&[channels, states]),
            w_delta: NdArray::zeros(&[channels, channels]),
            delta_bias: NdArray::zeros(&[channels]),
            w_b: NdArray::zeros(&[states, channels]),
            w_c: NdArray::zeros(&[states, channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.log_a.shape()[0]
    }

    pub fn states(&self) -> usize {
        self.log_a.shape()[1]
    }

    pub fn state_matrix(&self) -> NdArray {
        self.log_a.map(|v| -v.exp())
    }

    pub fn arrays(&self) -> [&NdArray; 5] {
        [
            &self.log_a,
            &self.w_delta,
            &self.delta_bias,
            &self.w_b,
            &self.w_c,
        ]
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (name, arr) in SSM_PARAM_NAMES.iter().zip(self.arrays()) {
            store.insert(format!("{prefix}.{name}"), arr.clone())?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |name: &str| store.value(&format!("{prefix}.{name}")).cloned();
        Ok(Self {
            log_a: get("log_a")?,
            w_delta: get("w_delta")?,
            delta_bias: get("delta_bias")?,
            w_b: get("w_b")?,
            w_c: get("w_c")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SsmGrads(pub SsmParams);

impl SsmGrads {
    pub fn accumulate_into(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (name, arr) in SSM_PARAM_NAMES.iter().zip(self.0.arrays()) {
            store.accumulate(&format!("{prefix}.{name}"), arr)?;
        }
        Ok(())
    }
}

/// Activations kept for [`selective_scan_backward`].
#[derive(Clone, Debug)]
pub struct SelectiveSaved {
    /// Pre-softplus `Δ` logits, `[L, D]`.
    pub z: NdArray,
    pub delta: NdArray,
    pub a: NdArray,
    pub b: NdArray,
    pub c: NdArray,
    pub core: CoreSaved,
}

/// `(z, Δ, B, C)` for every step.
fn project(x: &NdArray, p: &SsmParams) -> Result<(NdArray, NdArray, NdArray, NdArray)> {
    let (l, d) = match *x.shape() {
        [l, d] if d == p.channels() => (l, d),
        _ => {
            return Err(Error::Shape(format!(
                "sequence {:?} vs {} SSM channels",
                x.shape(),
                p.channels()
            )))
        }
    };
    if l < 1 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let n = p.states();
    let xd = x.data();
    let (wd, bd, wb, wc) = (
        p.w_delta.data(),
        p.delta_bias.data(),
        p.w_b.data(),
        p.w_c.data(),
    );
    let mut z = vec![0.0; l * d];
    let mut bm = vec![0.0; l * n];
    let mut cm = vec![0.0; l * n];
    for t in 0..l {
        let xt = &xd[t * d..(t + 1) * d];
        for o in 0..d {
            z[t * d + o] = bd[o]
                + wd[o * d..(o + 1) * d]
                    .iter()
                    .zip(xt)
                    .map(|(w, v)| w * v)
                    .sum::<f64>();
        }
        for s in 0..n {
            bm[t * n + s] = wb[s * d..(s + 1) * d].iter().zip(xt).map(|(w, v)| w * v).sum();
            cm[t * n + s] = wc[s * d..(s + 1) * d].iter().zip(xt).map(|(w, v)| w * v).sum();
        }
    }
    let z = NdArray::new(&[l, d], z)?;
    let delta = z.map(softplus);
    Ok((z, delta, NdArray::new(&[l, n], bm)?, NdArray::new(&[l, n], cm)?))
}

/// Input-dependent scan over an `[L, D]` sequence; `h_0 = 0`, no skip term.
pub fn selective_scan(x: &NdArray, p: &SsmParams) -> Result<(NdArray, SelectiveSaved)> {
    let (z, delta, b, c) = project(x, p)?;
    let a = p.state_matrix();
    let (y, core) = scan_core(ScanInputs {
        x,
        delta: &delta,
        a: &a,
        b: &b,
        c: &c,
    })?;
    Ok((
        y,
        SelectiveSaved {
            z,
            delta,
            a,
            b,
            c,
            core,
        },
    ))
}

/// Same result as [`selective_scan`], evaluated blockwise.
pub fn selective_scan_parallel(x: &NdArray, p: &SsmParams, block: usize) -> Result<NdArray> {
    let (_, delta, b, c) = project(x, p)?;
    let a = p.state_matrix();
    scan_core_parallel(
        ScanInputs {
            x,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
        },
        block,
    )
}

pub fn selective_scan_backward(
    x: &NdArray,
    p: &SsmParams,
    saved: &SelectiveSaved,
    dy: &NdArray,
) -> Result<(NdArray, SsmGrads)> {
    let core = scan_core_backward(
        ScanInputs {
            x,
            delta: &saved.delta,
            a: &saved.a,
            b: &saved.b,
            c: &saved.c,
        },
        &saved.core,
        dy,
    )?;
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let n = p.states();
    let xd = x.data();
    let mut dx = core.dx.into_data();
    let mut g = SsmParams::zeros(d, n);
    // A = −exp(log_a)  =>  dA/dlog_a = A
    for (gl, (&da, &av)) in g
        .log_a
        .data_mut()
        .iter_mut()
        .zip(core.da.data().iter().zip(saved.a.data()))
    {
        *gl = da * av;
    }
    let (wd, wb, wc) = (p.w_delta.data(), p.w_b.data(), p.w_c.data());
    for t in 0..l {
        let xt = &xd[t * d..(t + 1) * d];
        for o in 0..d {
            let dz = core.ddelta.data()[t * d + o] * sigmoid(saved.z.data()[t * d + o]);
            if dz == 0.0 {
                continue;
            }
            g.delta_bias.data_mut()[o] += dz;
            for i in 0..d {
                g.w_delta.data_mut()[o * d + i] += dz * xt[i];
                dx[t * d + i] += dz * wd[o * d + i];
            }
        }
        for s in 0..n {
            let gb = core.db.data()[t * n + s];
            let gc = core.dc.data()[t * n + s];
            for i in 0..d {
                g.w_b.data_mut()[s * d + i] += gb * xt[i];
                g.w_c.data_mut()[s * d + i] += gc * xt[i];
                dx[t * d + i] += gb * wb[s * d + i] + gc * wc[s * d + i];
            }
        }
    }
    Ok((NdArray::new(&[l, d], dx)?, SsmGrads(g)))
}
