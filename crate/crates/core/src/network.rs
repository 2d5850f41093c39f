//! The reconstruction network: shallow convolution, residual groups of
//! degradation-modulated Mamba blocks, and a pixel-shuffle head that
//! upsamples along the h axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    ops::{dims4, gelu, gelu_grad, layer_norm_channels, layer_norm_channels_backward},
    NdArray, ParamStore,
};
use crate::error::{Error, Result};
use crate::layers::{uniform, Conv3, Depthwise3, Pointwise};
use crate::scanpath::PathSet;
use crate::vemm::{Vemm, VemmCache, VemmConfig};

fn default_channels() -> usize {
    16
}
fn default_four() -> usize {
    4
}
fn default_scale() -> usize {
    2
}
fn default_states() -> usize {
    8
}
fn default_embed() -> usize {
    64
}
fn default_hidden() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_four")]
    pub groups: usize,
    #[serde(default = "default_four")]
    pub blocks: usize,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default = "default_states")]
    pub states: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub dwam_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: default_channels(),
            groups: 4,
            blocks: 4,
            scale: default_scale(),
            states: default_states(),
            embed_dim: default_embed(),
            dwam_hidden: default_hidden(),
        }
    }
}

impl ModelConfig {
    /// C=16, one group of two blocks, s=2.
    pub fn micro() -> Self {
        Self {
            groups: 1,
            blocks: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::OddChannels(self.channels));
        }
        if self.scale < 2 {
            return Err(Error::InvalidArgument(format!(
                "scale must be at least 2, got {}",
                self.scale
            )));
        }
        for (what, v) in [
            ("groups", self.groups),
            ("blocks", self.blocks),
            ("states", self.states),
            ("embed_dim", self.embed_dim),
            ("dwam_hidden", self.dwam_hidden),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{what} must be at least 1")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// degradation-conditioned modulation

/// `scale(d) ⊙ LayerNorm(F) + shift(d)` with per-channel affine maps from
/// the embedding.
#[derive(Clone, Debug)]
pub struct Vdim {
    scale_w: String,
    scale_b: String,
    shift_w: String,
    shift_b: String,
    channels: usize,
    embed: usize,
}

pub struct VdimCache {
    xhat: NdArray,
    inv_std: Vec<f64>,
    scale: Vec<f64>,
}

fn affine_embed(w: &NdArray, b: &NdArray, d: &[f64]) -> Vec<f64> {
    let (c, l) = (w.shape()[0], w.shape()[1]);
    (0..c)
        .map(|i| b.data()[i] + (0..l).map(|j| w.data()[i * l + j] * d[j]).sum::<f64>())
        .collect()
}

impl Vdim {
    pub fn new(prefix: &str, channels: usize, embed: usize) -> Self {
        Self {
            scale_w: format!("{prefix}.scale.w"),
            scale_b: format!("{prefix}.scale.b"),
            shift_w: format!("{prefix}.shift.w"),
            shift_b: format!("{prefix}.shift.b"),
            channels,
            embed,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        let (c, l) = (self.channels, self.embed);
        store.insert(&self.scale_w, NdArray::zeros(&[c, l]))?;
        store.insert(&self.scale_b, NdArray::full(&[c], 1.0))?;
        store.insert(&self.shift_w, NdArray::zeros(&[c, l]))?;
        store.insert(&self.shift_b, NdArray::zeros(&[c]))
    }

    fn check_embed(&self, d: &[f64]) -> Result<()> {
        if d.len() != self.embed {
            return Err(Error::Shape(format!(
                "degradation embedding has length {}, expected {}",
                d.len(),
                self.embed
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        f: &NdArray,
        d: &[f64],
    ) -> Result<(NdArray, VdimCache)> {
        self.check_embed(d)?;
        let (nf, c, nh, nw) = dims4(f)?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "modulation expects {} channels, got {c}",
                self.channels
            )));
        }
        let scale = affine_embed(store.value(&self.scale_w)?, store.value(&self.scale_b)?, d);
        let shift = affine_embed(store.value(&self.shift_w)?, store.value(&self.shift_b)?, d);
        let (xhat, inv_std) = layer_norm_channels(f)?;
        let plane = nh * nw;
        let mut out = xhat.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = scale[ch] * *v + shift[ch];
        }
        debug_assert_eq!(out.len(), nf * c * plane);
        Ok((
            out,
            VdimCache {
                xhat,
                inv_std,
                scale,
            },
        ))
    }

    /// Returns the feature and embedding cotangents.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &VdimCache,
        d: &[f64],
        dy: &NdArray,
    ) -> Result<(NdArray, Vec<f64>)> {
        let (_, c, nh, nw) = dims4(&cache.xhat)?;
        let plane = nh * nw;
        let mut dscale = vec![0.0; c];
        let mut dshift = vec![0.0; c];
        let mut dxhat = dy.clone();
        for (i, g) in dxhat.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            dscale[ch] += *g * cache.xhat.data()[i];
            dshift[ch] += *g;
            *g *= cache.scale[ch];
        }
        let df = layer_norm_channels_backward(&cache.xhat, &cache.inv_std, &dxhat)?;
        let l = self.embed;
        let mut dd = vec![0.0; l];
        for (w, b, g) in [
            (&self.scale_w, &self.scale_b, &dscale),
            (&self.shift_w, &self.shift_b, &dshift),
        ] {
            let wv = store.value(w)?;
            for i in 0..c {
                for j in 0..l {
                    dd[j] += wv.data()[i * l + j] * g[i];
                }
            }
            let dw = NdArray::from_fn(&[c, l], |k| g[k / l] * d[k % l]);
            store.accumulate(w, &dw)?;
            store.accumulate(b, &NdArray::new(&[c], g.clone())?)?;
        }
        Ok((df, dd))
    }
}

// ---------------------------------------------------------------------------
// convolutional feed-forward

#[derive(Clone, Debug)]
pub struct ConvFfn {
    expand: Pointwise,
    depthwise: Depthwise3,
    project: Pointwise,
}

pub struct ConvFfnCache {
    x: NdArray,
    a: NdArray,
    b: NdArray,
    g: NdArray,
}

impl ConvFfn {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            expand: Pointwise::new(&format!("{prefix}.expand"), channels, 2 * channels),
            depthwise: Depthwise3::new(&format!("{prefix}.dw"), 2 * channels),
            project: Pointwise::new(&format!("{prefix}.project"), 2 * channels, channels),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.expand.init(store, 1.0, rng)?;
        self.depthwise.init(store, 1.0, rng)?;
        self.project.init(store, 0.5, rng)
    }

    pub fn forward(&self, store: &ParamStore, x: &NdArray) -> Result<(NdArray, ConvFfnCache)> {
        let a = self.expand.forward(store, x)?;
        let b = self.depthwise.forward(store, &a)?;
        let g = b.map(gelu);
        let y = self.project.forward(store, &g)?;
        Ok((
            y,
            ConvFfnCache {
                x: x.clone(),
                a,
                b,
                g,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &ConvFfnCache,
        dy: &NdArray,
    ) -> Result<NdArray> {
        let dg = self.project.backward(store, &cache.g, dy)?;
        let db = dg.zip_map(&cache.b, |g, b| g * gelu_grad(b))?;
        let da = self.depthwise.backward(store, &cache.a, &db)?;
        self.expand.backward(store, &cache.x, &da)
    }
}

// ---------------------------------------------------------------------------
// residual blocks and groups

#[derive(Clone, Debug)]
pub struct Rvmb {
    pub vdim1: Vdim,
    pub vemm: Vemm,
    pub vdim2: Vdim,
    pub ffn: ConvFfn,
}

pub struct RvmbCache {
    v1: VdimCache,
    vemm: VemmCache,
    v2: VdimCache,
    ffn: ConvFfnCache,
}

impl Rvmb {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            vdim1: Vdim::new(&format!("{prefix}.vdim1"), c, cfg.embed_dim),
            vemm: Vemm::new(
                &format!("{prefix}.vemm"),
                VemmConfig::new(c, cfg.states, cfg.dwam_hidden),
            )?,
            vdim2: Vdim::new(&format!("{prefix}.vdim2"), c, cfg.embed_dim),
            ffn: ConvFfn::new(&format!("{prefix}.ffn"), c),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.vdim1.init(store)?;
        self.vemm.init(store, rng)?;
        self.vdim2.init(store)?;
        self.ffn.init(store, rng)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        paths: &PathSet,
        f: &NdArray,
        d: &[f64],
    ) -> Result<(NdArray, RvmbCache)> {
        let (m1, v1) = self.vdim1.forward(store, f, d)?;
        let (s, vemm) = self.vemm.forward(store, paths, &m1)?;
        let x1 = f.add(&s)?;
        let (m2, v2) = self.vdim2.forward(store, &x1, d)?;
        let (t, ffn) = self.ffn.forward(store, &m2)?;
        let out = x1.add(&t)?;
        Ok((out, RvmbCache { v1, vemm, v2, ffn }))
    }

    /// Returns the feature cotangent and adds the embedding cotangent into `dd`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        paths: &PathSet,
        cache: &RvmbCache,
        d: &[f64],
        dy: &NdArray,
        dd: &mut [f64],
    ) -> Result<NdArray> {
        let dm2 = self.ffn.backward(store, &cache.ffn, dy)?;
        let (dx1_mod, dd2) = self.vdim2.backward(store, &cache.v2, d, &dm2)?;
        let mut dx1 = dy.clone();
        dx1.axpy(1.0, &dx1_mod)?;
        let dm1 = self.vemm.backward(store, paths, &cache.vemm, &dx1)?;
        let (df_mod, dd1) = self.vdim1.backward(store, &cache.v1, d, &dm1)?;
        let mut df = dx1;
        df.axpy(1.0, &df_mod)?;
        for (acc, (a, b)) in dd.iter_mut().zip(dd1.iter().zip(&dd2)) {
            *acc += a + b;
        }
        Ok(df)
    }
}

#[derive(Clone, Debug)]
pub struct Rvmg {
    pub blocks: Vec<Rvmb>,
    pub conv: Conv3,
}

pub struct RvmgCache {
    blocks: Vec<RvmbCache>,
    last: NdArray,
}

impl Rvmg {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            blocks: (0..cfg.blocks)
                .map(|j| Rvmb::new(&format!("{prefix}.blocks.{j}"), cfg))
                .collect::<Result<_>>()?,
            conv: Conv3::new(&format!("{prefix}.conv"), cfg.channels, cfg.channels),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.conv.init(store, 0.5, rng)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        paths: &PathSet,
        f: &NdArray,
        d: &[f64],
    ) -> Result<(NdArray, RvmgCache)> {
        let mut x = f.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(store, paths, &x, d)?;
            caches.push(c);
            x = y;
        }
        let out = f.add(&self.conv.forward(store, &x)?)?;
        Ok((
            out,
            RvmgCache {
                blocks: caches,
                last: x,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        paths: &PathSet,
        cache: &RvmgCache,
        d: &[f64],
        dy: &NdArray,
        dd: &mut [f64],
    ) -> Result<NdArray> {
        let mut g = self.conv.backward(store, &cache.last, dy)?;
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = b.backward(store, paths, c, d, &g, dd)?;
        }
        g.axpy(1.0, dy)?;
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// pixel shuffle along h

/// `(F, s·C, h, W) -> (F, C, s·h, W)`; output `(f, c, y·s + j, x)` reads
/// input channel `j·C + c` at `(f, y, x)`.
pub fn pixel_shuffle_h(x: &NdArray, s: usize) -> Result<NdArray> {
    let (nf, sc, nh, nw) = dims4(x)?;
    if s == 0 || sc % s != 0 {
        return Err(Error::Shape(format!(
            "{sc} channels cannot be shuffled by factor {s}"
        )));
    }
    let c = sc / s;
    let mut out = NdArray::zeros(&[nf, c, nh * s, nw]);
    let od = out.data_mut();
    for f in 0..nf {
        for j in 0..s {
            for ch in 0..c {
                for y in 0..nh {
                    let src = ((f * sc + j * c + ch) * nh + y) * nw;
                    let dst = ((f * c + ch) * nh * s + y * s + j) * nw;
                    od[dst..dst + nw].copy_from_slice(&x.data()[src..src + nw]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle_h`], which is also its adjoint.
pub fn pixel_unshuffle_h(x: &NdArray, s: usize) -> Result<NdArray> {
    let (nf, c, nhs, nw) = dims4(x)?;
    if s == 0 || nhs % s != 0 {
        return Err(Error::Shape(format!(
            "height {nhs} cannot be unshuffled by factor {s}"
        )));
    }
    let nh = nhs / s;
    let sc = s * c;
    let mut out = NdArray::zeros(&[nf, sc, nh, nw]);
    let od = out.data_mut();
    for f in 0..nf {
        for j in 0..s {
            for ch in 0..c {
                for y in 0..nh {
                    let dst = ((f * sc + j * c + ch) * nh + y) * nw;
                    let src = ((f * c + ch) * nhs + y * s + j) * nw;
                    od[dst..dst + nw].copy_from_slice(&x.data()[src..src + nw]);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// full model

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub shallow: Conv3,
    pub groups: Vec<Rvmg>,
    pub upsample: Conv3,
    pub output: Conv3,
}

pub struct ModelCache {
    x: NdArray,
    groups: Vec<RvmgCache>,
    sum: NdArray,
    shuffled: NdArray,
    paths: PathSet,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            shallow: Conv3::new("shallow", 1, c),
            groups: (0..cfg.groups)
                .map(|i| Rvmg::new(&format!("groups.{i}"), &cfg))
                .collect::<Result<_>>()?,
            upsample: Conv3::new("head.up", c, cfg.scale * c),
            output: Conv3::new("head.out", c, 1),
            cfg,
        })
    }

    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.shallow.init(&mut store, 1.0, rng)?;
        for g in &self.groups {
            g.init(&mut store, rng)?;
        }
        self.upsample.init(&mut store, 1.0, rng)?;
        self.output.init(&mut store, 1.0, rng)?;
        Ok(store)
    }

    /// Total scalar parameter count of a freshly initialized model.
    pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
        let model = Self::new(cfg.clone())?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(model.init(&mut rng)?.num_scalars())
    }

    fn check_input(&self, x: &NdArray) -> Result<[usize; 3]> {
        let (nf, c, nh, nw) = dims4(x)?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "model input must be single-channel, got {c} channels"
            )));
        }
        Ok([nf, nh, nw])
    }

    /// `x`: `(F, 1, h, W)`; returns `(F, 1, s·h, W)`.
    pub fn forward(&self, store: &ParamStore, x: &NdArray, d: &[f64]) -> Result<NdArray> {
        Ok(self.forward_cached(store, x, d)?.0)
    }

    pub fn forward_cached(
        &self,
        store: &ParamStore,
        x: &NdArray,
        d: &[f64],
    ) -> Result<(NdArray, ModelCache)> {
        let dims = self.check_input(x)?;
        let paths = PathSet::new(dims)?;
        let fs = self.shallow.forward(store, x)?;
        let mut feat = fs.clone();
        let mut caches = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let (y, c) = g.forward(store, &paths, &feat, d)?;
            feat = y;
            caches.push(c);
        }
        // shallow and deep features are fused by addition
        let sum = fs.add(&feat)?;
        let up = self.upsample.forward(store, &sum)?;
        let shuffled = pixel_shuffle_h(&up, self.cfg.scale)?;
        let out = self.output.forward(store, &shuffled)?;
        Ok((
            out,
            ModelCache {
                x: x.clone(),
                groups: caches,
                sum,
                shuffled,
                paths,
            },
        ))
    }

    /// Accumulates parameter cotangents; returns the input and embedding
    /// cotangents.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &ModelCache,
        d: &[f64],
        dy: &NdArray,
    ) -> Result<(NdArray, Vec<f64>)> {
        let dshuf = self.output.backward(store, &cache.shuffled, dy)?;
        let dup = pixel_unshuffle_h(&dshuf, self.cfg.scale)?;
        let dsum = self.upsample.backward(store, &cache.sum, &dup)?;
        let mut dd = vec![0.0; d.len()];
        let mut g = dsum.clone();
        for (i, grp) in self.groups.iter().enumerate().rev() {
            g = grp.backward(store, &cache.paths, &cache.groups[i], d, &g, &mut dd)?;
        }
        g.axpy(1.0, &dsum)?;
        let dx = self.shallow.backward(store, &cache.x, &g)?;
        Ok((dx, dd))
    }
}

/// Random embedding-like vector for tests and warm starts.
pub fn random_embedding(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v = uniform(&[len], 1.0, rng);
    let n = v.data().iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    v.data().iter().map(|a| a / n).collect()
}
