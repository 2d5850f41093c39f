//! Adam and the warmup-cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{NdArray, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, NdArray>,
    pub v: BTreeMap<String, NdArray>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter in `store` from its accumulated
    /// gradient. Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (name, p) in store.iter_mut() {
            let shape = p.value.shape().to_vec();
            let m = self
                .m
                .entry(name.to_owned())
                .or_insert_with(|| NdArray::zeros(&shape));
            let v = self
                .v
                .entry(name.to_owned())
                .or_insert_with(|| NdArray::zeros(&shape));
            if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("optimizer moments for {name} have the wrong shape")));
            }
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * g[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * g[i] * g[i];
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 5e-5,
            warmup_epochs: 10,
            total_epochs: 200,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "warmup ({}) must be shorter than the run ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidArgument("base learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0, then cosine annealing to 0 at `total_epochs`.
/// Fractional epochs are allowed so the rate can change within an epoch.
pub fn lr_at(epoch: f64, s: &Schedule) -> f64 {
    let w = s.warmup_epochs as f64;
    let t = s.total_epochs as f64;
    if epoch < w {
        return s.base_lr * epoch.max(0.0) / w;
    }
    let p = ((epoch - w) / (t - w)).clamp(0.0, 1.0);
    s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("t", NdArray::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = one_param(0.7);
        let mut a = Adam::new();
        for _ in 0..10 {
            a.step(&mut s, 0.1).unwrap();
        }
        assert_eq!(s.value("t").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = one_param(0.0);
        s.grad_mut("t").unwrap().data_mut()[0] = 1.0;
        let mut a = Adam::new();
        a.step(&mut s, 0.1).unwrap();
        let th = s.value("t").unwrap().data()[0];
        assert!((th + 0.1).abs() < 1e-8, "{th}");
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut s = one_param(1.0);
        let mut a = Adam::new();
        for _ in 0..500 {
            let th = s.value("t").unwrap().data()[0];
            s.grad_mut("t").unwrap().data_mut()[0] = 2.0 * th;
            a.step(&mut s, 0.05).unwrap();
        }
        assert!(s.value("t").unwrap().data()[0].abs() < 1e-2);
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::default();
        assert_eq!(lr_at(0.0, &s), 0.0);
        assert!((lr_at(10.0, &s) - 5e-5).abs() < 1e-20);
        assert!((lr_at(5.0, &s) - 2.5e-5).abs() < 1e-18);
        assert!(lr_at(200.0, &s).abs() < 1e-20);
        let mid = lr_at(105.0, &s);
        assert!((mid - 2.5e-5).abs() < 1e-12);
        assert!(Schedule { warmup_epochs: 5, total_epochs: 5, ..s }.validate().is_err());
    }
}
