//! Single-channel volumes, the `VEMV` container, synthetic phantoms and
//! subvolume extraction.
//!
//! `VEMV` layout (little-endian):
//!
//! | bytes | field                          |
//! |-------|--------------------------------|
//! | 4     | magic `VEMV`                   |
//! | 4     | u32 version (= 1)              |
//! | 12    | u32 F, u32 h, u32 W            |
//! | 12    | f32 spacing z, y, x (nm)       |
//! | 1     | dtype tag (0 = f32)            |
//! | 4·n   | f32 values in (f, y, x) order  |

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::NdArray;
use crate::error::{Error, Result};

pub const VEMV_MAGIC: [u8; 4] = *b"VEMV";
pub const VEMV_VERSION: u32 = 1;
pub const VEMV_HEADER_LEN: usize = 4 + 4 + 12 + 12 + 1;
pub const MIN_PHANTOM_DIMS: [usize; 3] = [8, 16, 16];

/// Scalar field in `[0, 1]` with dims `(F, h, W)`, stored `(f, y, x)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::ZeroDimension(dims.to_vec()));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "voxel {i} has value {} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    /// Builds a volume from arbitrary values, clamping into `[0, 1]`.
    pub fn from_values_clamped(dims: [usize; 3], spacing: [f32; 3], values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 })
            .collect();
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize) -> usize {
        (f * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(f, y, x)]
    }

    /// As a one-channel feature tensor `(F, 1, h, W)`.
    pub fn to_feature(&self) -> NdArray {
        let [f, h, w] = self.dims;
        NdArray::new(&[f, 1, h, w], self.data.iter().map(|&v| v as f64).collect())
            .expect("volume dims are valid")
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &Volume) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "volume dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// file format

pub fn save_volume<W: Write>(v: &Volume, mut out: W) -> Result<()> {
    out.write_all(&to_bytes(v))?;
    Ok(())
}

pub fn load_volume<R: Read>(mut src: R) -> Result<Volume> {
    let mut buf = Vec::new();
    src.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

pub fn to_bytes(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(VEMV_HEADER_LEN + 4 * v.len());
    out.extend_from_slice(&VEMV_MAGIC);
    out.extend_from_slice(&VEMV_VERSION.to_le_bytes());
    for d in v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(0);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn from_bytes(b: &[u8]) -> Result<Volume> {
    if b.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, no magic", b.len())));
    }
    let magic: [u8; 4] = b[..4].try_into().unwrap();
    if magic != VEMV_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: VEMV_MAGIC,
        });
    }
    if b.len() < VEMV_HEADER_LEN {
        return Err(Error::Truncated(format!(
            "header needs {VEMV_HEADER_LEN} bytes, got {}",
            b.len()
        )));
    }
    let version = le_u32(b, 4);
    if version != VEMV_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims = [
        le_u32(b, 8) as usize,
        le_u32(b, 12) as usize,
        le_u32(b, 16) as usize,
    ];
    if dims.contains(&0) {
        return Err(Error::ZeroDimension(dims.to_vec()));
    }
    let spacing = [le_f32(b, 20), le_f32(b, 24), le_f32(b, 28)];
    let tag = b[32];
    if tag != 0 {
        return Err(Error::UnsupportedDtype(tag));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidArgument(format!("dims {dims:?} overflow")))?;
    let payload = &b[VEMV_HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(Error::Truncated(format!(
            "payload needs {} bytes, got {}",
            4 * n,
            payload.len()
        )));
    }
    let data = payload.chunks_exact(4).map(|c| le_f32(c, 0)).collect();
    Volume::new(dims, spacing, data)
}

/// Raw 8-bit volume in (f, y, x) order, rescaled by 1/255.
pub fn import_raw_u8(bytes: &[u8], dims: [usize; 3], spacing: [f32; 3]) -> Result<Volume> {
    let n: usize = dims.iter().product();
    if bytes.len() != n {
        return Err(Error::Truncated(format!(
            "raw volume {dims:?} needs {n} bytes, got {}",
            bytes.len()
        )));
    }
    Volume::new(dims, spacing, bytes.iter().map(|&b| b as f32 / 255.0).collect())
}

// ---------------------------------------------------------------------------
// cropping and axis transposes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubvolumeSpec {
    pub origin: [usize; 3],
    pub shape: [usize; 3],
}

impl SubvolumeSpec {
    pub fn new(origin: [usize; 3], shape: [usize; 3]) -> Self {
        Self { origin, shape }
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.shape[a] >= 1 && self.origin[a] + self.shape[a] <= dims[a])
    }
}

pub fn crop(v: &Volume, spec: &SubvolumeSpec) -> Result<Volume> {
    if !spec.fits(v.dims) {
        return Err(Error::OutOfBounds {
            origin: spec.origin,
            shape: spec.shape,
            dims: v.dims,
        });
    }
    let [o0, o1, o2] = spec.origin;
    Volume::from_fn(spec.shape, v.spacing, |f, y, x| v.get(o0 + f, o1 + y, o2 + x))
}

/// Swaps the section axis into the height slot: `(F, h, W) -> (h, F, W)`.
pub fn transpose_axial_to_h(v: &Volume) -> Volume {
    swap_f_h(v)
}

/// Inverse of [`transpose_axial_to_h`].
pub fn transpose_h_to_axial(v: &Volume) -> Volume {
    swap_f_h(v)
}

fn swap_f_h(v: &Volume) -> Volume {
    let [f, h, w] = v.dims;
    let [sz, sy, sx] = v.spacing;
    Volume::from_fn([h, f, w], [sy, sz, sx], |a, b, x| v.get(b, a, x))
        .expect("transpose of a valid volume is valid")
}

// ---------------------------------------------------------------------------
// phantoms

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
    value: f64,
}

struct Sheet {
    normal: [f64; 3],
    offset: f64,
    half_thickness: f64,
    bend: f64,
}

/// Smooth lattice noise: random values on a coarse grid, trilinearly
/// interpolated.
struct LatticeNoise {
    grid: [usize; 3],
    cell: [f64; 3],
    values: Vec<f64>,
}

impl LatticeNoise {
    fn new(dims: [usize; 3], cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let grid = dims.map(|d| (d as f64 / cell).ceil() as usize + 2);
        let values = (0..grid.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self {
            grid,
            cell: [cell; 3],
            values,
        }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = p[a] / self.cell[a];
            base[a] = u.floor() as usize;
            frac[a] = u - u.floor();
        }
        let idx = |i: usize, j: usize, k: usize| ((i * self.grid[1]) + j) * self.grid[2] + k;
        let mut acc = 0.0;
        for (di, wi) in [(0, 1.0 - frac[0]), (1, frac[0])] {
            for (dj, wj) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                for (dk, wk) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                    acc += wi * wj * wk * self.values[idx(base[0] + di, base[1] + dj, base[2] + dk)];
                }
            }
        }
        acc
    }
}

fn smoothstep_edge(d: f64, width: f64) -> f64 {
    // 1 inside (d < 0), 0 outside, logistic transition of the given width
    1.0 / (1.0 + (d / width).exp())
}

/// Deterministic synthetic EM-like volume: textured background, smooth
/// ellipsoidal organelles with dark rims, and thin dark membrane sheets.
pub fn generate_phantom(dims: [usize; 3], seed: u64) -> Result<Volume> {
    if (0..3).any(|a| dims[a] < MIN_PHANTOM_DIMS[a]) {
        return Err(Error::InvalidArgument(format!(
            "phantom dims {dims:?} smaller than minimum {MIN_PHANTOM_DIMS:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7068_616e_746f_6d00);
    let fd = dims.map(|d| d as f64);
    let min_extent = fd.iter().cloned().fold(f64::MAX, f64::min);

    let coarse = LatticeNoise::new(dims, (min_extent / 2.0).max(4.0), &mut rng);
    let fine = LatticeNoise::new(dims, 3.0, &mut rng);
    let background = rng.random_range(0.55..0.7);

    let n_ellipsoids = 3 + (fd[1] * fd[2] / 400.0).sqrt() as usize + rng.random_range(0..3);
    let ellipsoids: Vec<Ellipsoid> = (0..n_ellipsoids)
        .map(|_| Ellipsoid {
            center: [
                rng.random_range(0.0..fd[0]),
                rng.random_range(0.0..fd[1]),
                rng.random_range(0.0..fd[2]),
            ],
            radii: [
                rng.random_range(0.2..0.45) * fd[0],
                rng.random_range(2.5..0.25 * fd[1].max(12.0)),
                rng.random_range(2.5..0.25 * fd[2].max(12.0)),
            ],
            angle: rng.random_range(0.0..std::f64::consts::PI),
            value: rng.random_range(0.25..0.45),
        })
        .collect();

    let n_sheets = 2 + rng.random_range(0..2);
    let sheets: Vec<Sheet> = (0..n_sheets)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let tilt: f64 = rng.random_range(-0.3..0.3);
            let n = [tilt.sin(), tilt.cos() * theta.sin(), tilt.cos() * theta.cos()];
            let center = [fd[0] / 2.0, fd[1] / 2.0, fd[2] / 2.0];
            let c_dot = n[0] * center[0] + n[1] * center[1] + n[2] * center[2];
            Sheet {
                normal: n,
                offset: c_dot + rng.random_range(-0.35..0.35) * min_extent.max(fd[1]),
                half_thickness: rng.random_range(0.5..1.0),
                bend: rng.random_range(-0.04..0.04),
            }
        })
        .collect();

    let mut data = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let mut v = background + 0.12 * coarse.at(p) + 0.06 * fine.at(p);
                for e in &ellipsoids {
                    let d = [p[0] - e.center[0], p[1] - e.center[1], p[2] - e.center[2]];
                    let (s, c) = e.angle.sin_cos();
                    let ry = c * d[1] + s * d[2];
                    let rx = -s * d[1] + c * d[2];
                    let r = ((d[0] / e.radii[0]).powi(2)
                        + (ry / e.radii[1]).powi(2)
                        + (rx / e.radii[2]).powi(2))
                    .sqrt();
                    let inside = smoothstep_edge(r - 1.0, 0.06);
                    let rim = (-((r - 1.0) / 0.08).powi(2)).exp();
                    v = v * (1.0 - inside) + (e.value + 0.05 * fine.at(p)) * inside;
                    v -= 0.25 * rim;
                }
                for sh in &sheets {
                    let lateral = p[1] - fd[1] / 2.0;
                    let dist = sh.normal[0] * p[0] + sh.normal[1] * p[1] + sh.normal[2] * p[2]
                        - sh.offset
                        - sh.bend * lateral * lateral;
                    let w = smoothstep_edge(dist.abs() - sh.half_thickness, 0.25);
                    v = v * (1.0 - w) + 0.08 * w;
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume::new(dims, [1.0, 1.0, 1.0], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert_eq, proptest};

    fn indexed(dims: [usize; 3]) -> Volume {
        // values f*100 + y*10 + x scaled into [0,1]
        Volume::from_fn(dims, [1.0; 3], |f, y, x| {
            (f * 100 + y * 10 + x) as f32 / 1000.0
        })
        .unwrap()
    }

    #[test]
    fn one_voxel_stream_is_37_bytes() {
        let v = Volume::new([1, 1, 1], [1.0; 3], vec![0.5]).unwrap();
        let b = to_bytes(&v);
        assert_eq!(b.len(), 4 + 4 + 12 + 12 + 1 + 4);
        assert_eq!(&b[..4], b"VEMV");
        assert_eq!(from_bytes(&b).unwrap(), v);
    }

    #[test]
    fn bad_magic() {
        let v = Volume::new([1, 1, 1], [1.0; 3], vec![0.5]).unwrap();
        let mut b = to_bytes(&v);
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(from_bytes(&b), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn distinct_header_errors() {
        let v = Volume::new([1, 2, 1], [1.0; 3], vec![0.5, 0.25]).unwrap();
        let good = to_bytes(&v);
        assert!(matches!(
            from_bytes(&good[..good.len() - 1]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(from_bytes(&good[..10]), Err(Error::Truncated(_))));
        let mut b = good.clone();
        b[32] = 1;
        assert!(matches!(from_bytes(&b), Err(Error::UnsupportedDtype(1))));
        let mut b = good.clone();
        b[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(from_bytes(&b), Err(Error::ZeroDimension(_))));
        let mut b = good;
        b[4] = 2;
        assert!(matches!(from_bytes(&b), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn full_crop_is_identity() {
        let v = indexed([3, 4, 5]);
        let c = crop(&v, &SubvolumeSpec::new([0, 0, 0], [3, 4, 5])).unwrap();
        assert_eq!(c, v);
    }

    #[test]
    fn crop_index_mapping() {
        let v = indexed([4, 5, 6]);
        let c = crop(&v, &SubvolumeSpec::new([1, 2, 3], [2, 3, 2])).unwrap();
        for f in 0..2 {
            for y in 0..3 {
                for x in 0..2 {
                    let expect = ((f + 1) * 100 + (y + 2) * 10 + (x + 3)) as f32 / 1000.0;
                    assert_eq!(c.get(f, y, x), expect);
                }
            }
        }
        assert!(matches!(
            crop(&v, &SubvolumeSpec::new([3, 0, 0], [2, 1, 1])),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn transpose_pair_roundtrip() {
        let v = Volume::from_fn([3, 4, 5], [30.0, 4.0, 5.0], |f, y, x| {
            ((f * 7 + y * 3 + x) % 11) as f32 / 11.0
        })
        .unwrap();
        let t = transpose_axial_to_h(&v);
        assert_eq!(t.dims(), [4, 3, 5]);
        assert_eq!(t.spacing(), [4.0, 30.0, 5.0]);
        assert_eq!(t.get(2, 1, 3), v.get(1, 2, 3));
        assert_eq!(transpose_h_to_axial(&t), v);
    }

    #[test]
    fn phantom_determinism_and_range() {
        let a = generate_phantom([8, 16, 16], 5).unwrap();
        let b = generate_phantom([8, 16, 16], 5).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn phantom_seeds_differ() {
        let a = generate_phantom([16, 32, 32], 1).unwrap();
        let b = generate_phantom([16, 32, 32], 2).unwrap();
        let mad = a.mean_abs_diff(&b).unwrap();
        assert!(mad > 0.01, "mean abs diff {mad}");
    }

    #[test]
    fn phantom_has_dark_membranes_and_contrast() {
        let a = generate_phantom([16, 32, 32], 9).unwrap();
        let dark = a.data().iter().filter(|&&v| v < 0.15).count();
        assert!(dark > 0, "membrane voxels should be present");
        let var = {
            let m = a.mean();
            a.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / a.len() as f64
        };
        assert!(var > 1e-3);
    }

    #[test]
    fn phantom_dims_too_small() {
        assert!(generate_phantom([7, 16, 16], 0).is_err());
    }

    #[test]
    fn raw_import_rescales() {
        let v = import_raw_u8(&[0, 255, 51], [1, 1, 3], [1.0; 3]).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, 0.2]);
        assert!(import_raw_u8(&[0, 1], [1, 1, 3], [1.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn file_roundtrip_is_bitwise(
            f in 1usize..=8, h in 1usize..=8, w in 1usize..=8,
            seed in any::<u64>(),
            spacing in prop::array::uniform3(0.1f32..100.0),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Volume::from_fn([f, h, w], spacing, |_, _, _| rng.random_range(0.0f32..=1.0)).unwrap();
            let mut buf = Vec::new();
            save_volume(&v, &mut buf).unwrap();
            let back = load_volume(buf.as_slice()).unwrap();
            prop_assert_eq!(to_bytes(&back), buf);
            prop_assert_eq!(back, v);
        }
    }
}
