//! The volume Mamba block: channel chunking, eight selective scans along
//! axial-lateral trajectories, and softmax-weighted fusion of the four
//! directions of each chunk.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    ops::{dims4, gelu, gelu_grad},
    NdArray, ParamStore,
};
use crate::error::{Error, Result};
use crate::layers::{uniform, Pointwise};
use crate::scanpath::{chunk_channels, flatten, restore, unchunk, ChunkPair, PathSet, ScanAssignment};
use crate::ssm::{selective_scan, selective_scan_backward, SelectiveSaved, SsmGrads, SsmParams};

pub const DIRECTIONS: usize = 4;

// ---------------------------------------------------------------------------
// direction fusion

/// Two-layer perceptron mapping the 4 direction values at one
/// (voxel, channel) to 4 fusion logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DwamParams {
    /// `[4, H]`
    pub w1: NdArray,
    /// `[H]`
    pub b1: NdArray,
    /// `[H, 4]`
    pub w2: NdArray,
    /// `[4]`
    pub b2: NdArray,
}

const DWAM_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl DwamParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w1: NdArray::zeros(&[DIRECTIONS, hidden]),
            b1: NdArray::zeros(&[hidden]),
            w2: NdArray::zeros(&[hidden, DIRECTIONS]),
            b2: NdArray::zeros(&[DIRECTIONS]),
        }
    }

    pub fn init(hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: uniform(&[DIRECTIONS, hidden], 0.5, rng),
            b1: NdArray::zeros(&[hidden]),
            w2: uniform(&[hidden, DIRECTIONS], 0.1 / (hidden as f64).sqrt(), rng),
            b2: NdArray::zeros(&[DIRECTIONS]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn arrays(&self) -> [&NdArray; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (n, a) in DWAM_NAMES.iter().zip(self.arrays()) {
            store.insert(format!("{prefix}.{n}"), a.clone())?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| store.value(&format!("{prefix}.{n}")).cloned();
        Ok(Self {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    fn accumulate_into(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (n, a) in DWAM_NAMES.iter().zip(self.arrays()) {
            store.accumulate(&format!("{prefix}.{n}"), a)?;
        }
        Ok(())
    }

    /// Softmax weights over the 4 directions for one value vector.
    pub fn weights(&self, v: [f64; DIRECTIONS], hidden_buf: &mut [f64]) -> [f64; DIRECTIONS] {
        let h = self.hidden();
        let (w1, b1, w2, b2) = (self.w1.data(), self.b1.data(), self.w2.data(), self.b2.data());
        let mut logits = [b2[0], b2[1], b2[2], b2[3]];
        for j in 0..h {
            let pre = b1[j] + (0..DIRECTIONS).map(|d| v[d] * w1[d * h + j]).sum::<f64>();
            let act = gelu(pre);
            hidden_buf[j] = pre;
            for (k, l) in logits.iter_mut().enumerate() {
                *l += act * w2[j * DIRECTIONS + k];
            }
        }
        softmax4(logits)
    }
}

fn softmax4(l: [f64; 4]) -> [f64; 4] {
    let m = l.iter().cloned().fold(f64::MIN, f64::max);
    let e = l.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

fn check_four(inputs: &[&NdArray; DIRECTIONS]) -> Result<()> {
    for t in &inputs[1..] {
        t.ensure_shape(inputs[0].shape(), "direction fusion input")?;
    }
    Ok(())
}

/// Softmax-weighted sum over the four direction tensors at every
/// (voxel, channel).
pub fn dwam(inputs: [&NdArray; DIRECTIONS], p: &DwamParams) -> Result<NdArray> {
    check_four(&inputs)?;
    let mut buf = vec![0.0; p.hidden()];
    let mut out = NdArray::zeros(inputs[0].shape());
    for (e, o) in out.data_mut().iter_mut().enumerate() {
        let v = [0, 1, 2, 3].map(|d| inputs[d].data()[e]);
        let w = p.weights(v, &mut buf);
        *o = (0..DIRECTIONS).map(|d| w[d] * v[d]).sum();
    }
    Ok(out)
}

/// Fusion weights for every element, `[4, ...]` flattened direction-major.
pub fn dwam_weights(inputs: [&NdArray; DIRECTIONS], p: &DwamParams) -> Result<Vec<[f64; 4]>> {
    check_four(&inputs)?;
    let mut buf = vec![0.0; p.hidden()];
    Ok((0..inputs[0].len())
        .map(|e| p.weights([0, 1, 2, 3].map(|d| inputs[d].data()[e]), &mut buf))
        .collect())
}

/// Returns the four input cotangents and the parameter cotangents.
pub fn dwam_backward(
    inputs: [&NdArray; DIRECTIONS],
    p: &DwamParams,
    dy: &NdArray,
) -> Result<([NdArray; DIRECTIONS], DwamParams)> {
    check_four(&inputs)?;
    dy.ensure_shape(inputs[0].shape(), "direction fusion cotangent")?;
    let h = p.hidden();
    let (w1, w2) = (p.w1.data(), p.w2.data());
    let mut g = DwamParams::zeros(h);
    let mut dins: [NdArray; DIRECTIONS] =
        std::array::from_fn(|_| NdArray::zeros(inputs[0].shape()));
    let mut pre = vec![0.0; h];
    let mut dpre = vec![0.0; h];
    for e in 0..dy.len() {
        let gy = dy.data()[e];
        if gy == 0.0 {
            continue;
        }
        let v = [0, 1, 2, 3].map(|d| inputs[d].data()[e]);
        let w = p.weights(v, &mut pre);
        // out = Σ w_d v_d
        let dw = v.map(|vd| gy * vd);
        let dot: f64 = (0..DIRECTIONS).map(|d| w[d] * dw[d]).sum();
        let dlogit: [f64; 4] = std::array::from_fn(|k| w[k] * (dw[k] - dot));
        let mut dv = w.map(|wd| wd * gy);
        {
            let gw2 = g.w2.data_mut();
            for j in 0..h {
                let act = gelu(pre[j]);
                let mut da = 0.0;
                for k in 0..DIRECTIONS {
                    gw2[j * DIRECTIONS + k] += act * dlogit[k];
                    da += w2[j * DIRECTIONS + k] * dlogit[k];
                }
                dpre[j] = da * gelu_grad(pre[j]);
            }
        }
        for (k, b) in g.b2.data_mut().iter_mut().enumerate() {
            *b += dlogit[k];
        }
        let gw1 = g.w1.data_mut();
        for j in 0..h {
            for d in 0..DIRECTIONS {
                gw1[d * h + j] += v[d] * dpre[j];
                dv[d] += w1[d * h + j] * dpre[j];
            }
        }
        for (j, b) in g.b1.data_mut().iter_mut().enumerate() {
            *b += dpre[j];
        }
        for d in 0..DIRECTIONS {
            dins[d].data_mut()[e] = dv[d];
        }
    }
    Ok((dins, g))
}

// ---------------------------------------------------------------------------
// VEMM

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VemmConfig {
    pub channels: usize,
    pub states: usize,
    pub dwam_hidden: usize,
    #[serde(default)]
    pub assignment: ScanAssignment,
}

impl VemmConfig {
    pub fn new(channels: usize, states: usize, dwam_hidden: usize) -> Self {
        Self {
            channels,
            states,
            dwam_hidden,
            assignment: ScanAssignment::default(),
        }
    }
}

/// Parameter layout of one block under a name prefix:
/// `in.{w,b}`, `out.{w,b}`, `ssm.{0..8}.*` (chunk-major, slot-minor) and
/// `dwam.{0,1}.*`.
#[derive(Clone, Debug)]
pub struct Vemm {
    pub prefix: String,
    pub cfg: VemmConfig,
    input: Pointwise,
    output: Pointwise,
}

struct Branch {
    seq: NdArray,
    saved: SelectiveSaved,
    restored: NdArray,
}

pub struct VemmCache {
    x: NdArray,
    chunks: ChunkPair,
    branches: Vec<Branch>,
    fused: NdArray,
}

impl VemmCache {
    /// Direction outputs restored to `(F, C/2, h, W)`, indexed chunk-major.
    pub fn restored(&self, chunk: usize, slot: usize) -> &NdArray {
        &self.branches[chunk * DIRECTIONS + slot].restored
    }

    /// Concatenated fused chunks before the output projection.
    pub fn fused(&self) -> &NdArray {
        &self.fused
    }
}

impl Vemm {
    pub fn new(prefix: &str, cfg: VemmConfig) -> Result<Self> {
        if cfg.channels % 2 != 0 {
            return Err(Error::OddChannels(cfg.channels));
        }
        Ok(Self {
            input: Pointwise::new(&format!("{prefix}.in"), cfg.channels, cfg.channels),
            output: Pointwise::new(&format!("{prefix}.out"), cfg.channels, cfg.channels),
            prefix: prefix.to_string(),
            cfg,
        })
    }

    pub fn ssm_prefix(&self, chunk: usize, slot: usize) -> String {
        format!("{}.ssm.{}", self.prefix, chunk * DIRECTIONS + slot)
    }

    pub fn dwam_prefix(&self, chunk: usize) -> String {
        format!("{}.dwam.{chunk}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.input.init(store, 1.0, rng)?;
        self.output.init(store, 0.5, rng)?;
        let half = self.cfg.channels / 2;
        for chunk in 0..2 {
            for slot in 0..DIRECTIONS {
                SsmParams::init(half, self.cfg.states, rng)
                    .register(store, &self.ssm_prefix(chunk, slot))?;
            }
            DwamParams::init(self.cfg.dwam_hidden, rng).register(store, &self.dwam_prefix(chunk))?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        paths: &PathSet,
        x: &NdArray,
    ) -> Result<(NdArray, VemmCache)> {
        let (nf, c, nh, nw) = dims4(x)?;
        if c != self.cfg.channels {
            return Err(Error::Shape(format!(
                "block expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        if paths.dims() != [nf, nh, nw] {
            return Err(Error::Shape(format!(
                "path set for {:?}, features are {:?}",
                paths.dims(),
                [nf, nh, nw]
            )));
        }
        let u = self.input.forward(store, x)?;
        let chunks = chunk_channels(&u)?;
        let jobs: Vec<(usize, usize, SsmParams)> = (0..2)
            .flat_map(|chunk| (0..DIRECTIONS).map(move |slot| (chunk, slot)))
            .map(|(chunk, slot)| {
                Ok((chunk, slot, SsmParams::from_store(store, &self.ssm_prefix(chunk, slot))?))
            })
            .collect::<Result<_>>()?;
        let branches: Vec<Branch> = jobs
            .par_iter()
            .map(|(chunk, slot, p)| {
                let path = paths.get(self.cfg.assignment.0[*chunk][*slot]);
                let src = if *chunk == 0 { &chunks.chunk1 } else { &chunks.chunk2 };
                let seq = flatten(src, path)?;
                let (y, saved) = selective_scan(&seq, p)?;
                let restored = restore(&y, path)?;
                Ok(Branch {
                    seq,
                    saved,
                    restored,
                })
            })
            .collect::<Result<_>>()?;
        let mut fused_chunks = Vec::with_capacity(2);
        for chunk in 0..2 {
            let p = DwamParams::from_store(store, &self.dwam_prefix(chunk))?;
            let ins: [&NdArray; 4] =
                std::array::from_fn(|s| &branches[chunk * DIRECTIONS + s].restored);
            fused_chunks.push(dwam(ins, &p)?);
        }
        let fused = unchunk(&ChunkPair {
            chunk2: fused_chunks.pop().unwrap(),
            chunk1: fused_chunks.pop().unwrap(),
        })?;
        let out = self.output.forward(store, &fused)?;
        Ok((
            out,
            VemmCache {
                x: x.clone(),
                chunks,
                branches,
                fused,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        paths: &PathSet,
        cache: &VemmCache,
        dy: &NdArray,
    ) -> Result<NdArray> {
        let dfused = self.output.backward(store, &cache.fused, dy)?;
        let dparts = chunk_channels(&dfused)?;
        let mut drestored: Vec<NdArray> = Vec::with_capacity(2 * DIRECTIONS);
        for chunk in 0..2 {
            let prefix = self.dwam_prefix(chunk);
            let p = DwamParams::from_store(store, &prefix)?;
            let ins: [&NdArray; 4] =
                std::array::from_fn(|s| &cache.branches[chunk * DIRECTIONS + s].restored);
            let dout = if chunk == 0 { &dparts.chunk1 } else { &dparts.chunk2 };
            let (dins, g) = dwam_backward(ins, &p, dout)?;
            g.accumulate_into(store, &prefix)?;
            drestored.extend(dins);
        }
        let jobs: Vec<(usize, usize, SsmParams)> = (0..2)
            .flat_map(|chunk| (0..DIRECTIONS).map(move |slot| (chunk, slot)))
            .map(|(chunk, slot)| {
                Ok((chunk, slot, SsmParams::from_store(store, &self.ssm_prefix(chunk, slot))?))
            })
            .collect::<Result<_>>()?;
        let results: Vec<(NdArray, SsmGrads)> = jobs
            .par_iter()
            .map(|(chunk, slot, p)| {
                let i = chunk * DIRECTIONS + slot;
                let path = paths.get(self.cfg.assignment.0[*chunk][*slot]);
                // restore is a permutation, so its adjoint is flatten and vice versa
                let dyseq = flatten(&drestored[i], path)?;
                let b = &cache.branches[i];
                let (dseq, g) = selective_scan_backward(&b.seq, p, &b.saved, &dyseq)?;
                Ok((restore(&dseq, path)?, g))
            })
            .collect::<Result<_>>()?;
        let mut dchunks = [
            NdArray::zeros(cache.chunks.chunk1.shape()),
            NdArray::zeros(cache.chunks.chunk2.shape()),
        ];
        for ((chunk, slot, _), (dchunk, g)) in jobs.iter().zip(results) {
            dchunks[*chunk].axpy(1.0, &dchunk)?;
            g.accumulate_into(store, &self.ssm_prefix(*chunk, *slot))?;
        }
        let [chunk1, chunk2] = dchunks;
        let du = unchunk(&ChunkPair { chunk1, chunk2 })?;
        self.input.backward(store, &cache.x, &du)
    }
}
