//! Whole-volume inference: degradation embedding, tiled model evaluation
//! with halo context and linear blending, and the nearest-neighbor baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NdArray, ParamStore};
use crate::error::{Error, Result};
use crate::moco::{Encoder, MIN_ENCODER_DIMS};
use crate::network::Model;
use crate::volume::{crop, transpose_axial_to_h, transpose_h_to_axial, SubvolumeSpec, Volume};

/// Which axis of the input is upsampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// The height axis of `(F, h, W)`.
    H,
    /// The section axis; realized by transposing it into the height slot.
    Z,
}

/// Repeats every row along h `s` times.
pub fn upsample_nearest_h(x: &Volume, s: usize) -> Result<Volume> {
    if s == 0 {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    let [f, h, w] = x.dims();
    let [sz, sy, sx] = x.spacing();
    Volume::from_fn([f, h * s, w], [sz, sy / s as f32, sx], |a, y, b| x.get(a, y / s, b))
}

/// Centered crop of at most `shape` (clipped to the volume).
pub fn center_crop(x: &Volume, shape: [usize; 3]) -> Result<Volume> {
    let dims = x.dims();
    let shape: [usize; 3] = std::array::from_fn(|a| shape[a].min(dims[a]));
    let origin: [usize; 3] = std::array::from_fn(|a| (dims[a] - shape[a]) / 2);
    crop(x, &SubvolumeSpec::new(origin, shape))
}

/// Degradation embedding of a volume from its centered `window` crop.
pub fn embed(encoder: &Encoder, params: &ParamStore, x: &Volume, window: [usize; 3]) -> Result<Vec<f64>> {
    let window: [usize; 3] = std::array::from_fn(|a| window[a].max(MIN_ENCODER_DIMS[a]));
    let c = center_crop(x, window)?;
    encoder.encode(params, &c.to_feature())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileConfig {
    /// Core tile size in input voxels `(F, h, W)`.
    pub tile: [usize; 3],
    /// Width of the linear cross-fade between neighboring tiles.
    pub overlap: usize,
    /// Context added around each tile and discarded after inference.
    pub halo: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tile: [16, 32, 64],
            overlap: 8,
            halo: 8,
        }
    }
}

/// Tile starts along one axis of length `n`.
fn starts(n: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut s: Vec<usize> = (0..).map(|i| i * stride).take_while(|&p| p + tile < n).collect();
    s.push(n - tile);
    s.dedup();
    s
}

/// Blend weight of position `i` in a tile `[a, b)` of an axis of length `n`:
/// ramps over `overlap` positions at interior edges, flat at volume borders.
fn ramp(i: usize, a: usize, b: usize, n: usize, overlap: usize) -> f64 {
    if overlap == 0 {
        return 1.0;
    }
    let o = overlap as f64;
    let mut w: f64 = 1.0;
    if a > 0 {
        w = w.min(((i - a) as f64 + 0.5) / o);
    }
    if b < n {
        w = w.min(((b - i) as f64 - 0.5) / o);
    }
    w
}

/// Reconstruction engine for a trained model and frozen encoder.
pub struct Reconstructor<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
    pub tiles: TileConfig,
}

impl Reconstructor<'_> {
    /// Single-pass inference over the whole volume.
    pub fn whole(&self, x: &Volume, d: &[f64]) -> Result<Vec<f64>> {
        Ok(self.model.forward(self.params, &x.to_feature(), d)?.into_data())
    }

    /// Tiled inference along h; returns unclamped values of dims `(F, s·h, W)`.
    pub fn tiled(&self, x: &Volume, d: &[f64]) -> Result<Vec<f64>> {
        let s = self.model.cfg.scale;
        let dims = x.dims();
        let TileConfig { tile, overlap, halo } = self.tiles;
        if (0..3).any(|a| tile[a] <= overlap) {
            return Err(Error::InvalidArgument(format!(
                "tile {tile:?} must exceed the overlap {overlap}"
            )));
        }
        let tile: [usize; 3] = std::array::from_fn(|a| tile[a].min(dims[a]));
        let per_axis: Vec<Vec<usize>> = (0..3).map(|a| starts(dims[a], tile[a], overlap)).collect();
        let mut jobs = Vec::new();
        for &f0 in &per_axis[0] {
            for &y0 in &per_axis[1] {
                for &x0 in &per_axis[2] {
                    jobs.push([f0, y0, x0]);
                }
            }
        }
        let outs: Vec<(SubvolumeSpec, [usize; 3], NdArray)> = jobs
            .par_iter()
            .map(|&o| {
                let lo: [usize; 3] = std::array::from_fn(|a| o[a].saturating_sub(halo));
                let hi: [usize; 3] = std::array::from_fn(|a| (o[a] + tile[a] + halo).min(dims[a]));
                let spec = SubvolumeSpec::new(lo, std::array::from_fn(|a| hi[a] - lo[a]));
                let sub = crop(x, &spec)?;
                let y = self.model.forward(self.params, &sub.to_feature(), d)?;
                Ok((spec, o, y))
            })
            .collect::<Result<_>>()?;
        let [nf, nh, nw] = [dims[0], dims[1] * s, dims[2]];
        let mut acc = vec![0.0; nf * nh * nw];
        let mut wsum = vec![0.0; nf * nh * nw];
        // fixed accumulation order keeps the result independent of threads
        for (spec, o, y) in &outs {
            let [ef, eh, ew] = spec.shape;
            let eh = eh * s;
            let yd = y.data();
            for f in o[0]..o[0] + tile[0] {
                let wf = ramp(f, o[0], o[0] + tile[0], dims[0], overlap);
                for yy in o[1] * s..(o[1] + tile[1]) * s {
                    // ramps along h are measured in input rows
                    let wy = ramp(yy / s, o[1], o[1] + tile[1], dims[1], overlap);
                    for xx in o[2]..o[2] + tile[2] {
                        let wx = ramp(xx, o[2], o[2] + tile[2], dims[2], overlap);
                        let w = wf * wy * wx;
                        let src = ((f - spec.origin[0]) * eh + (yy - spec.origin[1] * s)) * ew
                            + (xx - spec.origin[2]);
                        let dst = (f * nh + yy) * nw + xx;
                        acc[dst] += w * yd[src];
                        wsum[dst] += w;
                    }
                }
            }
            debug_assert_eq!(yd.len(), ef * eh * ew);
        }
        Ok(acc.iter().zip(&wsum).map(|(a, w)| a / w).collect())
    }

    /// Tiled reconstruction along the requested axis, clamped into `[0, 1]`.
    pub fn reconstruct(&self, x: &Volume, d: &[f64], axis: Axis) -> Result<Volume> {
        let s = self.model.cfg.scale;
        match axis {
            Axis::H => {
                let [f, h, w] = x.dims();
                let [sz, sy, sx] = x.spacing();
                let y = self.tiled(x, d)?;
                Volume::from_values_clamped([f, h * s, w], [sz, sy / s as f32, sx], &y)
            }
            Axis::Z => {
                let t = transpose_axial_to_h(x);
                Ok(transpose_h_to_axial(&self.reconstruct(&t, d, Axis::H)?))
            }
        }
    }
}
