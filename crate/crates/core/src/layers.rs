//! Store-backed wrappers around the `diffcore::ops` kernels.

use rand::Rng;

use crate::diffcore::{ops, NdArray, ParamStore};
use crate::error::Result;

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> NdArray {
    if bound == 0.0 {
        return NdArray::zeros(shape);
    }
    NdArray::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// 1x1x1 channel mixing `Ci -> Co`.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub w: String,
    pub b: String,
    pub cin: usize,
    pub cout: usize,
}

impl Pointwise {
    pub fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            cin,
            cout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, gain: f64, rng: &mut impl Rng) -> Result<()> {
        let bound = gain / (self.cin as f64).sqrt();
        store.insert(&self.w, uniform(&[self.cout, self.cin], bound, rng))?;
        store.insert(&self.b, NdArray::zeros(&[self.cout]))
    }

    pub fn forward(&self, store: &ParamStore, x: &NdArray) -> Result<NdArray> {
        ops::pointwise(x, store.value(&self.w)?, store.value(&self.b)?)
    }

    pub fn backward(&self, store: &mut ParamStore, x: &NdArray, dy: &NdArray) -> Result<NdArray> {
        let w = store.value(&self.w)?.clone();
        let mut dw = NdArray::zeros(w.shape());
        let mut db = NdArray::zeros(&[self.cout]);
        let dx = ops::pointwise_backward(x, &w, dy, &mut dw, &mut db)?;
        store.accumulate(&self.w, &dw)?;
        store.accumulate(&self.b, &db)?;
        Ok(dx)
    }
}

/// Dense 3x3x3 convolution with reflect padding.
#[derive(Clone, Debug)]
pub struct Conv3 {
    pub w: String,
    pub b: String,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3 {
    pub fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            cin,
            cout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, gain: f64, rng: &mut impl Rng) -> Result<()> {
        let bound = gain / ((self.cin * 27) as f64).sqrt();
        store.insert(&self.w, uniform(&[self.cout, self.cin, 3, 3, 3], bound, rng))?;
        store.insert(&self.b, NdArray::zeros(&[self.cout]))
    }

    pub fn forward(&self, store: &ParamStore, x: &NdArray) -> Result<NdArray> {
        ops::conv3d(x, store.value(&self.w)?, store.value(&self.b)?)
    }

    pub fn backward(&self, store: &mut ParamStore, x: &NdArray, dy: &NdArray) -> Result<NdArray> {
        let w = store.value(&self.w)?.clone();
        let mut dw = NdArray::zeros(w.shape());
        let mut db = NdArray::zeros(&[self.cout]);
        let dx = ops::conv3d_backward(x, &w, dy, &mut dw, &mut db)?;
        store.accumulate(&self.w, &dw)?;
        store.accumulate(&self.b, &db)?;
        Ok(dx)
    }
}

/// Per-channel 3x3x3 convolution with reflect padding.
#[derive(Clone, Debug)]
pub struct Depthwise3 {
    pub w: String,
    pub b: String,
    pub channels: usize,
}

impl Depthwise3 {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore, gain: f64, rng: &mut impl Rng) -> Result<()> {
        let bound = gain / 27f64.sqrt();
        store.insert(&self.w, uniform(&[self.channels, 3, 3, 3], bound, rng))?;
        store.insert(&self.b, NdArray::zeros(&[self.channels]))
    }

    pub fn forward(&self, store: &ParamStore, x: &NdArray) -> Result<NdArray> {
        ops::depthwise_conv3d(x, store.value(&self.w)?, store.value(&self.b)?)
    }

    pub fn backward(&self, store: &mut ParamStore, x: &NdArray, dy: &NdArray) -> Result<NdArray> {
        let w = store.value(&self.w)?.clone();
        let mut dw = NdArray::zeros(w.shape());
        let mut db = NdArray::zeros(&[self.channels]);
        let dx = ops::depthwise_conv3d_backward(x, &w, dy, &mut dw, &mut db)?;
        store.accumulate(&self.w, &dw)?;
        store.accumulate(&self.b, &db)?;
        Ok(dx)
    }
}
