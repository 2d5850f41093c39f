//! "VEMC" checkpoint container: a JSON header followed by named f32 tensors.
//!
//! Layout: magic `VEMC`, u32 version, u32 header length, header JSON,
//! u32 tensor count, then per tensor: u32 name length, UTF-8 name, u32 rank,
//! rank × u32 dims, little-endian f32 values. All integers little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffcore::{NdArray, ParamStore};
use crate::error::{Error, Result};
use crate::moco::{Encoder, EncoderConfig};
use crate::network::{Model, ModelConfig};
use crate::optim::Adam;

pub const VEMC_MAGIC: [u8; 4] = *b"VEMC";
pub const VEMC_VERSION: u32 = 1;

const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";
/// Prefix of the momentum (key) encoder saved next to a query encoder.
pub const KEY_PREFIX: &str = "key.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Encoder,
}

/// Header of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: CheckpointKind,
    pub config: Value,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    #[serde(default)]
    pub extra: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, NdArray>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.b.len() - self.at < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.at,
                self.b.len() - self.at
            )));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&VEMC_MAGIC);
        out.extend_from_slice(&VEMC_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(&header);
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader { b, at: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != VEMC_MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: VEMC_MAGIC,
            });
        }
        let version = r.u32("version")? as u32;
        if version != VEMC_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let hlen = r.u32("header length")?;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?)?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
                .to_owned();
            let rank = r.u32("rank")?;
            let shape = (0..rank)
                .map(|_| r.u32("dims"))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
            let bytes = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?,
                &name,
            )?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            if tensors.insert(name.clone(), NdArray::new(&shape, data)?).is_some() {
                return Err(Error::DuplicateParam(name));
            }
        }
        if r.at != b.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                b.len() - r.at
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Packs parameters and, optionally, optimizer moments.
    pub fn pack(
        kind: CheckpointKind,
        config: Value,
        params: &ParamStore,
        optim: Option<&Adam>,
        extra: Value,
    ) -> Self {
        let mut tensors: BTreeMap<String, NdArray> = params
            .iter()
            .map(|(n, p)| (n.to_owned(), p.value.clone()))
            .collect();
        if let Some(a) = optim {
            for (n, m) in &a.m {
                tensors.insert(format!("{MOMENT1}{n}"), m.clone());
            }
            for (n, v) in &a.v {
                tensors.insert(format!("{MOMENT2}{n}"), v.clone());
            }
        }
        Self {
            header: Header {
                kind,
                config,
                step: optim.map_or(0, |a| a.step),
                extra,
            },
            tensors,
        }
    }

    fn is_reserved(name: &str) -> bool {
        [MOMENT1, MOMENT2, KEY_PREFIX].iter().any(|p| name.starts_with(p))
    }

    /// Stores `store` under `prefix` alongside the parameters.
    pub fn with_group(mut self, prefix: &str, store: &ParamStore) -> Self {
        for (n, p) in store.iter() {
            self.tensors.insert(format!("{prefix}{n}"), p.value.clone());
        }
        self
    }

    /// Tensors saved under `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (n, t) in &self.tensors {
            if let Some(rest) = n.strip_prefix(prefix) {
                s.insert(rest, t.clone())?;
            }
        }
        Ok(s)
    }

    /// Parameter tensors, excluding optimizer and auxiliary state.
    pub fn params(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (n, t) in &self.tensors {
            if !Self::is_reserved(n) {
                s.insert(n.clone(), t.clone())?;
            }
        }
        Ok(s)
    }

    /// Optimizer state, if moments were saved.
    pub fn optim(&self) -> Option<Adam> {
        let mut a = Adam::new();
        for (n, t) in &self.tensors {
            if let Some(p) = n.strip_prefix(MOMENT1) {
                a.m.insert(p.to_owned(), t.clone());
            } else if let Some(p) = n.strip_prefix(MOMENT2) {
                a.v.insert(p.to_owned(), t.clone());
            }
        }
        if a.m.is_empty() && a.v.is_empty() {
            return None;
        }
        a.step = self.header.step;
        Some(a)
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }
}

/// Every tensor of `reference` must be present with the same shape, and
/// nothing else may be.
fn validate_against(loaded: &ParamStore, reference: &ParamStore) -> Result<()> {
    for (n, p) in reference.iter() {
        let got = loaded
            .value(n)
            .map_err(|_| Error::Checkpoint(format!("missing tensor `{n}`")))?;
        if got.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{n}` has shape {:?}, config implies {:?}",
                got.shape(),
                p.value.shape()
            )));
        }
    }
    if let Some(n) = loaded.names().find(|n| !reference.contains(n)) {
        return Err(Error::Checkpoint(format!("unexpected tensor `{n}`")));
    }
    Ok(())
}

fn reference_rng() -> rand_chacha::ChaCha8Rng {
    <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0)
}

pub fn model_checkpoint(
    model: &Model,
    params: &ParamStore,
    optim: Option<&Adam>,
    extra: Value,
) -> Result<Checkpoint> {
    Ok(Checkpoint::pack(
        CheckpointKind::Model,
        serde_json::to_value(&model.cfg)?,
        params,
        optim,
        extra,
    ))
}

pub fn encoder_checkpoint(
    encoder: &Encoder,
    params: &ParamStore,
    optim: Option<&Adam>,
    extra: Value,
) -> Result<Checkpoint> {
    Ok(Checkpoint::pack(
        CheckpointKind::Encoder,
        serde_json::to_value(&encoder.cfg)?,
        params,
        optim,
        extra,
    ))
}

impl Checkpoint {
    /// Rebuilds the model and checks every tensor against its config.
    pub fn into_model(&self) -> Result<(Model, ParamStore)> {
        self.expect_kind(CheckpointKind::Model)?;
        let cfg: ModelConfig = serde_json::from_value(self.header.config.clone())?;
        let model = Model::new(cfg)?;
        let params = self.params()?;
        validate_against(&params, &model.init(&mut reference_rng())?)?;
        Ok((model, params))
    }

    /// Rebuilds the encoder (parameter prefix `enc`) and checks its tensors.
    pub fn into_encoder(&self) -> Result<(Encoder, ParamStore)> {
        self.expect_kind(CheckpointKind::Encoder)?;
        let cfg: EncoderConfig = serde_json::from_value(self.header.config.clone())?;
        let encoder = Encoder::new("enc", cfg)?;
        let params = self.params()?;
        let mut reference = ParamStore::new();
        encoder.init(&mut reference, &mut reference_rng())?;
        validate_against(&params, &reference)?;
        Ok((encoder, params))
    }
}

/// Rounds every value to f32 precision, the precision checkpoints store.
pub fn round_to_f32(store: &mut ParamStore) {
    for (_, p) in store.iter_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = *v as f32 as f64);
    }
}
