use std::collections::BTreeMap;

use super::NdArray;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: NdArray,
    pub grad: NdArray,
}

/// Named parameters with matching cotangent accumulators.
///
/// Iteration order is the lexical order of names, which fixes the layout of
/// checkpoints and the order of optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let grad = NdArray::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&NdArray> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut NdArray> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&NdArray> {
        Ok(&self.get(name)?.grad)
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut NdArray> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.grad)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Adds `delta` into the accumulator of `name`.
    pub fn accumulate(&mut self, name: &str, delta: &NdArray) -> Result<()> {
        self.grad_mut(name)?.axpy(1.0, delta)
    }

    pub fn set_value(&mut self, name: &str, value: NdArray) -> Result<()> {
        let slot = self.value_mut(name)?;
        value.ensure_shape(slot.shape(), name)?;
        *slot = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn grads_are_zero(&self) -> bool {
        self.params
            .values()
            .all(|p| p.grad.data().iter().all(|&g| g == 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// FNV-1a over names and the bit patterns of all values.
    pub fn checksum(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, p) in &self.params {
            eat(name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies every value of `other` into the same-named slot here.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in &other.params {
            self.set_value(name, p.value.clone())?;
        }
        Ok(())
    }
}

pub fn zero_grads(mut store: ParamStore) -> ParamStore {
    store.zero_grads();
    store
}
