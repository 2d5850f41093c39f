//! Anisotropy simulation: Gaussian blur along h, stride subsampling and
//! additive Gaussian noise, plus the crop samplers built on top of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::ops::reflect;
use crate::error::{Error, Result};
use crate::volume::{crop, SubvolumeSpec, Volume};

/// Parameters of one simulated acquisition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationProfile {
    pub filter_size: usize,
    pub blur_sigma: f64,
    pub scale: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradationProfile {
    fn default() -> Self {
        Self {
            filter_size: 8,
            blur_sigma: 4.0,
            scale: 2,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl DegradationProfile {
    pub fn validate(&self) -> Result<()> {
        if self.filter_size < 1 {
            return Err(Error::InvalidArgument("filter size must be at least 1".into()));
        }
        if !(self.blur_sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "blur sigma must be positive, got {}",
                self.blur_sigma
            )));
        }
        if self.scale < 2 {
            return Err(Error::InvalidArgument(format!(
                "scale must be at least 2, got {}",
                self.scale
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Ranges profiles are drawn from during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRanges {
    pub filter_size: usize,
    pub blur_sigma: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub scale: usize,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            filter_size: 8,
            blur_sigma: [4.0, 4.0],
            noise_sigma: [0.0, 0.02],
            scale: 2,
        }
    }
}

impl DegradationRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> DegradationProfile {
        let draw = |r: [f64; 2], rng: &mut dyn rand::RngCore| {
            if r[1] > r[0] {
                rng.random_range(r[0]..=r[1])
            } else {
                r[0]
            }
        };
        let blur_sigma = draw(self.blur_sigma, rng);
        let noise_sigma = draw(self.noise_sigma, rng);
        DegradationProfile {
            filter_size: self.filter_size,
            blur_sigma,
            scale: self.scale,
            noise_sigma,
            seed: rng.random(),
        }
    }
}

/// Centered, normalized Gaussian of length `2·⌈f/2⌉ + 1`.
pub fn gaussian_kernel(filter_size: usize, sigma: f64) -> Result<Vec<f64>> {
    if filter_size < 1 || !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel needs f >= 1 and sigma > 0, got f={filter_size}, sigma={sigma}"
        )));
    }
    let r = filter_size.div_ceil(2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    Ok(k)
}

/// 1D convolution along h with reflect padding.
pub fn blur_h(values: &[f64], dims: [usize; 3], kernel: &[f64]) -> Vec<f64> {
    let [nf, nh, nw] = dims;
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; values.len()];
    for f in 0..nf {
        for y in 0..nh {
            let row = (f * nh + y) * nw;
            for (t, &kv) in kernel.iter().enumerate() {
                let src = (f * nh + reflect(y as isize + t as isize - r, nh)) * nw;
                for x in 0..nw {
                    out[row + x] += kv * values[src + x];
                }
            }
        }
    }
    out
}

/// Keeps rows `0, s, 2s, ...` along h.
pub fn subsample_h(values: &[f64], dims: [usize; 3], s: usize) -> Result<([usize; 3], Vec<f64>)> {
    let [nf, nh, nw] = dims;
    if s == 0 || nh % s != 0 {
        return Err(Error::InvalidArgument(format!(
            "height {nh} is not divisible by scale {s}"
        )));
    }
    let oh = nh / s;
    let mut out = Vec::with_capacity(nf * oh * nw);
    for f in 0..nf {
        for y in 0..oh {
            let src = (f * nh + y * s) * nw;
            out.extend_from_slice(&values[src..src + nw]);
        }
    }
    Ok(([nf, oh, nw], out))
}

/// Blur and subsample without noise or clamping; linear in `values`.
pub fn degrade_linear(
    values: &[f64],
    dims: [usize; 3],
    p: &DegradationProfile,
) -> Result<([usize; 3], Vec<f64>)> {
    p.validate()?;
    if values.len() != dims.iter().product::<usize>() {
        return Err(Error::Shape(format!(
            "{} values for dims {dims:?}",
            values.len()
        )));
    }
    if dims[1] % p.scale != 0 {
        return Err(Error::InvalidArgument(format!(
            "height {} is not divisible by scale {}",
            dims[1], p.scale
        )));
    }
    let k = gaussian_kernel(p.filter_size, p.blur_sigma)?;
    subsample_h(&blur_h(values, dims, &k), dims, p.scale)
}

/// Full degradation: blur, subsample, seeded noise, clamp to `[0, 1]`.
pub fn degrade(y: &Volume, p: &DegradationProfile) -> Result<Volume> {
    let (dims, mut v) = degrade_linear(&y.to_f64(), y.dims(), p)?;
    if p.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let normal = Normal::new(0.0, p.noise_sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for a in v.iter_mut() {
            *a += normal.sample(&mut rng);
        }
    }
    let [sf, sh, sw] = y.spacing();
    Volume::from_values_clamped(dims, [sf, sh * p.scale as f32, sw], &v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub x: Volume,
    pub y: Volume,
    pub profile: DegradationProfile,
}

pub fn make_training_pair(
    src: &Volume,
    spec: &SubvolumeSpec,
    p: &DegradationProfile,
) -> Result<TrainingPair> {
    let y = crop(src, spec)?;
    let x = degrade(&y, p)?;
    Ok(TrainingPair { x, y, profile: *p })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MocoPair {
    pub query: Volume,
    pub key: Volume,
    pub query_spec: SubvolumeSpec,
    pub key_spec: SubvolumeSpec,
}

fn random_origin(dims: [usize; 3], shape: [usize; 3], rng: &mut impl Rng) -> [usize; 3] {
    std::array::from_fn(|a| rng.random_range(0..=dims[a] - shape[a]))
}

/// Two same-shape crops of one degraded parent at different origins. With
/// `disjoint_axial` the section ranges do not overlap.
pub fn sample_moco_pair(
    parent: &Volume,
    shape: [usize; 3],
    seed: u64,
    disjoint_axial: bool,
) -> Result<MocoPair> {
    let dims = parent.dims();
    let depth_needed = if disjoint_axial { 2 * shape[0] } else { shape[0] };
    let fits = shape.iter().all(|&s| s >= 1)
        && depth_needed <= dims[0]
        && shape[1] <= dims[1]
        && shape[2] <= dims[2];
    // two distinct origins need at least one axis with slack
    let slack = (0..3).any(|a| dims[a] > shape[a]);
    if !fits || !slack {
        return Err(Error::InvalidArgument(format!(
            "parent {dims:?} is too small for two {shape:?} crops"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (qo, ko) = if disjoint_axial {
        let d = shape[0];
        let a = rng.random_range(0..=dims[0] - 2 * d);
        let b = rng.random_range(a + d..=dims[0] - d);
        let mut q = random_origin(dims, shape, &mut rng);
        let mut k = random_origin(dims, shape, &mut rng);
        if rng.random::<bool>() {
            (q[0], k[0]) = (a, b);
        } else {
            (q[0], k[0]) = (b, a);
        }
        (q, k)
    } else {
        let q = random_origin(dims, shape, &mut rng);
        let mut k = random_origin(dims, shape, &mut rng);
        while k == q {
            k = random_origin(dims, shape, &mut rng);
        }
        (q, k)
    };
    let query_spec = SubvolumeSpec::new(qo, shape);
    let key_spec = SubvolumeSpec::new(ko, shape);
    Ok(MocoPair {
        query: crop(parent, &query_spec)?,
        key: crop(parent, &key_spec)?,
        query_spec,
        key_spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::generate_phantom;

    #[test]
    fn kernel_normalized_symmetric() {
        for (f, s) in [(1, 0.5), (2, 1.0), (8, 4.0), (7, 2.3), (16, 9.0)] {
            let k = gaussian_kernel(f, s).unwrap();
            assert_eq!(k.len(), 2 * f.div_ceil(2) + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k.len() {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn kernel_small_sigma_is_delta() {
        let k = gaussian_kernel(2, 0.1).unwrap();
        assert_eq!(k.len(), 3);
        assert!((k[1] - 1.0).abs() < 1e-12 && k[0] < 1e-12 && k[2] < 1e-12);
    }

    #[test]
    fn kernel_center_value() {
        let z: f64 = (-4..=4).map(|k: i32| (-(k * k) as f64 / 32.0).exp()).sum();
        let k = gaussian_kernel(8, 4.0).unwrap();
        assert!((k[4] - 1.0 / z).abs() < 1e-15);
        assert!((k[4] - 0.134_66).abs() < 1e-4);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(gaussian_kernel(0, 1.0).is_err());
        assert!(gaussian_kernel(3, 0.0).is_err());
        let p = DegradationProfile {
            scale: 1,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let v = Volume::from_fn([2, 5, 4], [1.0; 3], |_, _, _| 0.5).unwrap();
        assert!(degrade(&v, &DegradationProfile::default()).is_err());
    }

    #[test]
    fn constant_volume_keeps_its_value() {
        let v = Volume::from_fn([2, 8, 4], [1.0; 3], |_, _, _| 0.375).unwrap();
        let p = DegradationProfile {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let out = degrade(&v, &p).unwrap();
        assert_eq!(out.dims(), [2, 4, 4]);
        assert!(out.data().iter().all(|&a| (a - 0.375).abs() < 1e-6));
    }

    #[test]
    fn impulse_column_matches_kernel() {
        let (nh, c) = (20, 9);
        let mut v = vec![0.0; nh];
        v[c] = 1.0;
        let k = gaussian_kernel(8, 2.0).unwrap();
        let out = blur_h(&v, [1, nh, 1], &k);
        for y in 0..nh {
            let d = y as isize - c as isize;
            let want = if d.abs() <= 4 { k[(d + 4) as usize] } else { 0.0 };
            assert!((out[y] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let v = generate_phantom([8, 16, 16], 3).unwrap();
        let p = DegradationProfile::default();
        assert_eq!(degrade(&v, &p).unwrap(), degrade(&v, &p).unwrap());
        let q = DegradationProfile { seed: 1, ..p };
        let a = degrade(&v, &p).unwrap();
        let b = degrade(&v, &q).unwrap();
        assert!(a.mean_abs_diff(&b).unwrap() > 0.0);
    }
}
