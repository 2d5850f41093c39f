//! Axial-lateral scan ordering of 3D feature volumes.
//!
//! A feature volume `(F, C, h, W)` is split into two channel chunks, and each
//! chunk is read out along four continuous trajectories: axial-first and
//! lateral-first, each forward and reversed. Every trajectory is a full
//! boustrophedon, so consecutive voxels are always grid neighbors.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ops::dims4, NdArray};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanOrder {
    /// The section axis `f` varies fastest; the lateral plane is walked
    /// one voxel column at a time.
    AxialFirst,
    /// Each section's `(y, x)` plane is walked completely before stepping to
    /// the next section.
    LateralFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Direction {
    pub order: ScanOrder,
    pub reversed: bool,
}

impl Direction {
    pub const fn new(order: ScanOrder, reversed: bool) -> Self {
        Self { order, reversed }
    }

    pub fn flipped(self) -> Self {
        Self {
            reversed: !self.reversed,
            ..self
        }
    }
}

/// The four directions read out of each chunk, per chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanAssignment(pub [[Direction; 4]; 2]);

impl ScanAssignment {
    pub const ALL_FOUR: [Direction; 4] = [
        Direction::new(ScanOrder::AxialFirst, false),
        Direction::new(ScanOrder::AxialFirst, true),
        Direction::new(ScanOrder::LateralFirst, false),
        Direction::new(ScanOrder::LateralFirst, true),
    ];
}

impl Default for ScanAssignment {
    fn default() -> Self {
        Self([Self::ALL_FOUR, Self::ALL_FOUR])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanPath {
    pub dims: [usize; 3],
    pub direction: Direction,
    /// `perm[i]` is the linear `(f, y, x)` index visited at step `i`.
    pub perm: Vec<usize>,
}

impl ScanPath {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// Serpentine raster of the `(y, x)` plane.
fn lateral_raster(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        if y % 2 == 0 {
            out.extend((0..w).map(|x| (y, x)));
        } else {
            out.extend((0..w).rev().map(|x| (y, x)));
        }
    }
    out
}

pub fn build_path(dims: [usize; 3], order: ScanOrder, reversed: bool) -> Result<ScanPath> {
    if dims.contains(&0) {
        return Err(Error::ZeroDimension(dims.to_vec()));
    }
    let [nf, nh, nw] = dims;
    let idx = |f: usize, y: usize, x: usize| (f * nh + y) * nw + x;
    let raster = lateral_raster(nh, nw);
    let mut perm = Vec::with_capacity(nf * nh * nw);
    match order {
        ScanOrder::LateralFirst => {
            for f in 0..nf {
                if f % 2 == 0 {
                    perm.extend(raster.iter().map(|&(y, x)| idx(f, y, x)));
                } else {
                    perm.extend(raster.iter().rev().map(|&(y, x)| idx(f, y, x)));
                }
            }
        }
        ScanOrder::AxialFirst => {
            for (k, &(y, x)) in raster.iter().enumerate() {
                if k % 2 == 0 {
                    perm.extend((0..nf).map(|f| idx(f, y, x)));
                } else {
                    perm.extend((0..nf).rev().map(|f| idx(f, y, x)));
                }
            }
        }
    }
    if reversed {
        perm.reverse();
    }
    Ok(ScanPath {
        dims,
        direction: Direction { order, reversed },
        perm,
    })
}

/// Checks bijectivity and unit-step continuity of a path.
pub fn verify_path(path: &ScanPath) -> std::result::Result<(), String> {
    let [_, nh, nw] = path.dims;
    let n: usize = path.dims.iter().product();
    if path.perm.len() != n {
        return Err(format!("path has {} entries for {} voxels", path.perm.len(), n));
    }
    let mut seen = vec![false; n];
    for &p in &path.perm {
        if p >= n || seen[p] {
            return Err(format!("index {p} out of range or repeated"));
        }
        seen[p] = true;
    }
    let coord = |i: usize| (i / (nh * nw), (i / nw) % nh, i % nw);
    for (step, w) in path.perm.windows(2).enumerate() {
        let (a, b) = (coord(w[0]), coord(w[1]));
        let d = a.0.abs_diff(b.0) + a.1.abs_diff(b.1) + a.2.abs_diff(b.2);
        if d != 1 {
            return Err(format!("step {step}: {a:?} -> {b:?} has distance {d}"));
        }
    }
    Ok(())
}

/// The four distinct paths for one set of dims, indexed like
/// [`ScanAssignment::ALL_FOUR`].
#[derive(Clone, Debug)]
pub struct PathSet {
    dims: [usize; 3],
    paths: Vec<ScanPath>,
}

impl PathSet {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        let paths = ScanAssignment::ALL_FOUR
            .iter()
            .map(|d| build_path(dims, d.order, d.reversed))
            .collect::<Result<_>>()?;
        Ok(Self { dims, paths })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn get(&self, d: Direction) -> &ScanPath {
        let i = ScanAssignment::ALL_FOUR
            .iter()
            .position(|&x| x == d)
            .expect("all directions are present");
        &self.paths[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ScanPath> {
        self.paths.iter()
    }

    /// Test hook: duplicates an entry of the first path so it is no longer
    /// a permutation.
    pub fn corrupt_for_testing(&mut self) {
        let p = &mut self.paths[0].perm;
        if p.len() >= 2 {
            p[1] = p[0];
        }
    }
}

// ---------------------------------------------------------------------------
// channel chunks

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPair {
    pub chunk1: NdArray,
    pub chunk2: NdArray,
}

pub fn chunk_channels(x: &NdArray) -> Result<ChunkPair> {
    let (nf, c, nh, nw) = dims4(x)?;
    if c % 2 != 0 {
        return Err(Error::OddChannels(c));
    }
    let half = c / 2;
    let plane = nh * nw;
    let mut a = Vec::with_capacity(nf * half * plane);
    let mut b = Vec::with_capacity(nf * half * plane);
    for f in 0..nf {
        let sec = &x.data()[f * c * plane..(f + 1) * c * plane];
        a.extend_from_slice(&sec[..half * plane]);
        b.extend_from_slice(&sec[half * plane..]);
    }
    Ok(ChunkPair {
        chunk1: NdArray::new(&[nf, half, nh, nw], a)?,
        chunk2: NdArray::new(&[nf, half, nh, nw], b)?,
    })
}

pub fn unchunk(pair: &ChunkPair) -> Result<NdArray> {
    let (nf, half, nh, nw) = dims4(&pair.chunk1)?;
    pair.chunk2
        .ensure_shape(pair.chunk1.shape(), "unchunk chunk2")?;
    let plane = nh * nw;
    let mut out = Vec::with_capacity(2 * pair.chunk1.len());
    for f in 0..nf {
        let r = f * half * plane..(f + 1) * half * plane;
        out.extend_from_slice(&pair.chunk1.data()[r.clone()]);
        out.extend_from_slice(&pair.chunk2.data()[r]);
    }
    NdArray::new(&[nf, 2 * half, nh, nw], out)
}

// ---------------------------------------------------------------------------
// flatten / restore

/// `(F, C, h, W)` chunk to an `(L, C)` sequence along `path`.
pub fn flatten(chunk: &NdArray, path: &ScanPath) -> Result<NdArray> {
    let (nf, c, nh, nw) = dims4(chunk)?;
    if [nf, nh, nw] != path.dims {
        return Err(Error::Shape(format!(
            "chunk spatial dims {:?} vs path dims {:?}",
            [nf, nh, nw],
            path.dims
        )));
    }
    let plane = nh * nw;
    let d = chunk.data();
    let mut out = Vec::with_capacity(chunk.len());
    for &v in &path.perm {
        let (f, p) = (v / plane, v % plane);
        out.extend((0..c).map(|ch| d[(f * c + ch) * plane + p]));
    }
    NdArray::new(&[path.perm.len(), c], out)
}

/// Exact inverse of [`flatten`].
pub fn restore(seq: &NdArray, path: &ScanPath) -> Result<NdArray> {
    let [nf, nh, nw] = path.dims;
    let c = match *seq.shape() {
        [l, c] if l == path.perm.len() => c,
        _ => {
            return Err(Error::Shape(format!(
                "sequence {:?} does not match path of length {}",
                seq.shape(),
                path.perm.len()
            )))
        }
    };
    let plane = nh * nw;
    let mut out = NdArray::zeros(&[nf, c, nh, nw]);
    let od = out.data_mut();
    for (i, &v) in path.perm.iter().enumerate() {
        let (f, p) = (v / plane, v % plane);
        for ch in 0..c {
            od[(f * c + ch) * plane + p] = seq.data()[i * c + ch];
        }
    }
    Ok(out)
}
