//! Degradation representation learning: a residual convolutional encoder,
//! its momentum copy, and the InfoNCE objective over batch negatives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ops::dims4, NdArray, ParamStore};
use crate::error::{Error, Result};
use crate::layers::{uniform, Conv3};
use crate::optim::Adam;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const MIN_ENCODER_DIMS: [usize; 3] = [4, 8, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub blocks: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            blocks: 8,
            embed_dim: 64,
        }
    }
}

/// Running statistics are stored next to the parameters but are not
/// trained; they are recognized by name.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

#[derive(Clone, Debug)]
struct BnNames {
    gamma: String,
    beta: String,
    mean: String,
    var: String,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stem: Conv3,
    convs: Vec<Conv3>,
    bns: Vec<BnNames>,
    fc_w: String,
    fc_b: String,
}

struct BlockCache {
    input: Vec<NdArray>,
    xhat: Vec<NdArray>,
    pre: Vec<NdArray>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

pub struct EncoderCache {
    x: Vec<NdArray>,
    blocks: Vec<BlockCache>,
    last: Vec<NdArray>,
    pooled: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
    emb: Vec<Vec<f64>>,
    train: bool,
}

impl Encoder {
    pub fn new(prefix: &str, cfg: EncoderConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.blocks == 0 || cfg.embed_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder sizes must be positive: {cfg:?}"
            )));
        }
        let c = cfg.channels;
        Ok(Self {
            stem: Conv3::new(&format!("{prefix}.stem"), 1, c),
            convs: (0..cfg.blocks)
                .map(|i| Conv3::new(&format!("{prefix}.blocks.{i}.conv"), c, c))
                .collect(),
            bns: (0..cfg.blocks)
                .map(|i| {
                    let p = format!("{prefix}.blocks.{i}.bn");
                    BnNames {
                        gamma: format!("{p}.gamma"),
                        beta: format!("{p}.beta"),
                        mean: format!("{p}.running_mean"),
                        var: format!("{p}.running_var"),
                    }
                })
                .collect(),
            fc_w: format!("{prefix}.fc.w"),
            fc_b: format!("{prefix}.fc.b"),
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c = self.cfg.channels;
        self.stem.init(store, 1.0, rng)?;
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            conv.init(store, 1.0, rng)?;
            store.insert(&bn.gamma, NdArray::full(&[c], 1.0))?;
            store.insert(&bn.beta, NdArray::zeros(&[c]))?;
            store.insert(&bn.mean, NdArray::zeros(&[c]))?;
            store.insert(&bn.var, NdArray::full(&[c], 1.0))?;
        }
        let l = self.cfg.embed_dim;
        store.insert(&self.fc_w, uniform(&[l, c], 1.0 / (c as f64).sqrt(), rng))?;
        store.insert(&self.fc_b, NdArray::zeros(&[l]))
    }

    fn check_batch(&self, xs: &[NdArray]) -> Result<()> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty encoder batch".into()))?;
        let (nf, c, nh, nw) = dims4(first)?;
        if c != 1 {
            return Err(Error::Shape(format!("encoder input has {c} channels, expected 1")));
        }
        if nf < MIN_ENCODER_DIMS[0] || nh < MIN_ENCODER_DIMS[1] || nw < MIN_ENCODER_DIMS[2] {
            return Err(Error::InvalidArgument(format!(
                "encoder input {:?} is smaller than {MIN_ENCODER_DIMS:?}",
                [nf, nh, nw]
            )));
        }
        for x in &xs[1..] {
            x.ensure_shape(first.shape(), "encoder batch")?;
        }
        Ok(())
    }

    /// Embeds a batch of `(F, 1, h, W)` subvolumes. In training mode batch
    /// normalization uses batch statistics (see [`Self::commit_running_stats`]);
    /// otherwise the stored running statistics.
    pub fn forward(
        &self,
        store: &ParamStore,
        xs: &[NdArray],
        train: bool,
    ) -> Result<(Vec<Vec<f64>>, EncoderCache)> {
        self.check_batch(xs)?;
        if train && xs.len() * xs[0].len() < 2 {
            return Err(Error::InvalidArgument("batch statistics need more than one value".into()));
        }
        let c = self.cfg.channels;
        let mut h: Vec<NdArray> = xs
            .iter()
            .map(|x| self.stem.forward(store, x))
            .collect::<Result<_>>()?;
        let mut blocks = Vec::with_capacity(self.convs.len());
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            let pre: Vec<NdArray> = h
                .iter()
                .map(|x| conv.forward(store, x))
                .collect::<Result<_>>()?;
            let (nf, _, nh, nw) = dims4(&pre[0])?;
            let plane = nh * nw;
            let count = (pre.len() * nf * plane) as f64;
            let (mean, var) = if train {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for p in &pre {
                    for (i, v) in p.data().iter().enumerate() {
                        mean[(i / plane) % c] += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for p in &pre {
                    for (i, v) in p.data().iter().enumerate() {
                        let ch = (i / plane) % c;
                        var[ch] += (v - mean[ch]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            } else {
                (
                    store.value(&bn.mean)?.data().to_vec(),
                    store.value(&bn.var)?.data().to_vec(),
                )
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let gamma = store.value(&bn.gamma)?.data();
            let beta = store.value(&bn.beta)?.data();
            let mut xhat = Vec::with_capacity(pre.len());
            let mut next = Vec::with_capacity(pre.len());
            for (p, x) in pre.iter().zip(&h) {
                let mut xh = p.clone();
                let mut out = x.clone();
                for (i, v) in xh.data_mut().iter_mut().enumerate() {
                    let ch = (i / plane) % c;
                    *v = (*v - mean[ch]) * inv_std[ch];
                    out.data_mut()[i] += (gamma[ch] * *v + beta[ch]).max(0.0);
                }
                xhat.push(xh);
                next.push(out);
            }
            blocks.push(BlockCache {
                input: std::mem::replace(&mut h, next),
                xhat,
                pre,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let fc_w = store.value(&self.fc_w)?;
        let fc_b = store.value(&self.fc_b)?;
        let l = self.cfg.embed_dim;
        let mut pooled = Vec::with_capacity(h.len());
        let mut raw = Vec::with_capacity(h.len());
        let mut emb = Vec::with_capacity(h.len());
        for x in &h {
            let (_, _, nh, nw) = dims4(x)?;
            let plane = nh * nw;
            let n = (x.len() / c) as f64;
            let mut pool = vec![0.0; c];
            for (i, v) in x.data().iter().enumerate() {
                pool[(i / plane) % c] += v;
            }
            pool.iter_mut().for_each(|p| *p /= n);
            let z: Vec<f64> = (0..l)
                .map(|j| fc_b.data()[j] + (0..c).map(|k| fc_w.data()[j * c + k] * pool[k]).sum::<f64>())
                .collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            emb.push(z.iter().map(|v| v / norm).collect());
            pooled.push(pool);
            raw.push(z);
        }
        Ok((
            emb.clone(),
            EncoderCache {
                x: xs.to_vec(),
                blocks,
                last: h,
                pooled,
                raw,
                emb,
                train,
            },
        ))
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// statistics (unbiased variance, momentum 0.1).
    pub fn commit_running_stats(&self, store: &mut ParamStore, cache: &EncoderCache) -> Result<()> {
        if !cache.train {
            return Ok(());
        }
        let n = (cache.x.len() * cache.x[0].len()) as f64;
        let unbias = n / (n - 1.0).max(1.0);
        for (bn, b) in self.bns.iter().zip(&cache.blocks) {
            for (v, m) in store.value_mut(&bn.mean)?.data_mut().iter_mut().zip(&b.batch_mean) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * m;
            }
            for (v, s) in store.value_mut(&bn.var)?.data_mut().iter_mut().zip(&b.batch_var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * s * unbias;
            }
        }
        Ok(())
    }

    /// Accumulates parameter cotangents from embedding cotangents and
    /// returns the input cotangents.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &EncoderCache,
        demb: &[Vec<f64>],
    ) -> Result<Vec<NdArray>> {
        if demb.len() != cache.emb.len() {
            return Err(Error::Shape(format!(
                "{} embedding cotangents for a batch of {}",
                demb.len(),
                cache.emb.len()
            )));
        }
        let c = self.cfg.channels;
        let l = self.cfg.embed_dim;
        let fc_w = store.value(&self.fc_w)?.clone();
        let mut dfw = NdArray::zeros(&[l, c]);
        let mut dfb = NdArray::zeros(&[l]);
        let mut dh = Vec::with_capacity(demb.len());
        for (b, de) in demb.iter().enumerate() {
            let e = &cache.emb[b];
            let z = &cache.raw[b];
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let dot: f64 = e.iter().zip(de).map(|(a, g)| a * g).sum();
            let dz: Vec<f64> = (0..l).map(|j| (de[j] - e[j] * dot) / norm).collect();
            let mut dpool = vec![0.0; c];
            for j in 0..l {
                dfb.data_mut()[j] += dz[j];
                for k in 0..c {
                    dfw.data_mut()[j * c + k] += dz[j] * cache.pooled[b][k];
                    dpool[k] += fc_w.data()[j * c + k] * dz[j];
                }
            }
            let x = &cache.last[b];
            let (_, _, nh, nw) = dims4(x)?;
            let plane = nh * nw;
            let n = (x.len() / c) as f64;
            dh.push(NdArray::from_fn(x.shape(), |i| dpool[(i / plane) % c] / n));
        }
        store.accumulate(&self.fc_w, &dfw)?;
        store.accumulate(&self.fc_b, &dfb)?;

        for ((conv, bn), bc) in self.convs.iter().zip(&self.bns).rev().zip(cache.blocks.iter().rev()) {
            let gamma = store.value(&bn.gamma)?.data().to_vec();
            let beta = store.value(&bn.beta)?.data().to_vec();
            let (nf, _, nh, nw) = dims4(&bc.pre[0])?;
            let plane = nh * nw;
            let count = (bc.pre.len() * nf * plane) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            // cotangent of the normalized values, through ReLU and the affine
            let dxhat: Vec<NdArray> = bc
                .xhat
                .iter()
                .zip(&dh)
                .map(|(xh, g)| {
                    NdArray::from_fn(xh.shape(), |i| {
                        let ch = (i / plane) % c;
                        let xv = xh.data()[i];
                        if gamma[ch] * xv + beta[ch] > 0.0 {
                            let gi = g.data()[i];
                            dgamma[ch] += gi * xv;
                            dbeta[ch] += gi;
                            gi * gamma[ch]
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            let dpre: Vec<NdArray> = if cache.train {
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for (dx, xh) in dxhat.iter().zip(&bc.xhat) {
                    for i in 0..dx.len() {
                        let ch = (i / plane) % c;
                        s1[ch] += dx.data()[i];
                        s2[ch] += dx.data()[i] * xh.data()[i];
                    }
                }
                dxhat
                    .iter()
                    .zip(&bc.xhat)
                    .map(|(dx, xh)| {
                        NdArray::from_fn(dx.shape(), |i| {
                            let ch = (i / plane) % c;
                            bc.inv_std[ch]
                                * (dx.data()[i] - s1[ch] / count - xh.data()[i] * s2[ch] / count)
                        })
                    })
                    .collect()
            } else {
                dxhat
                    .iter()
                    .map(|dx| NdArray::from_fn(dx.shape(), |i| dx.data()[i] * bc.inv_std[(i / plane) % c]))
                    .collect()
            };
            store.accumulate(&bn.gamma, &NdArray::new(&[c], dgamma)?)?;
            store.accumulate(&bn.beta, &NdArray::new(&[c], dbeta)?)?;
            let mut next = Vec::with_capacity(dh.len());
            for ((g, dp), input) in dh.iter().zip(&dpre).zip(&bc.input) {
                let mut d = conv.backward(store, input, dp)?;
                d.axpy(1.0, g)?;
                next.push(d);
            }
            dh = next;
        }
        dh.iter()
            .zip(&cache.x)
            .map(|(g, x)| self.stem.backward(store, x, g))
            .collect()
    }

    /// Deterministic embedding of one subvolume with running statistics.
    pub fn encode(&self, store: &ParamStore, x: &NdArray) -> Result<Vec<f64>> {
        let (mut e, _) = self.forward(store, std::slice::from_ref(x), false)?;
        Ok(e.pop().expect("one input gives one embedding"))
    }
}

// ---------------------------------------------------------------------------
// contrastive objective

fn check_nce(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> Result<()> {
    if q.len() < 2 || q.len() != k.len() {
        return Err(Error::InvalidArgument(format!(
            "InfoNCE needs matching batches of at least 2, got {} and {}",
            q.len(),
            k.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let d = q[0].len();
    if q.iter().chain(k).any(|v| v.len() != d) {
        return Err(Error::Shape("embedding lengths differ".into()));
    }
    Ok(())
}

fn logits(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qi| {
            k.iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect()
        })
        .collect()
}

/// `−log(e^{l_ii} / Σ_j e^{l_ij})` evaluated without cancellation when the
/// positive dominates.
fn row_loss(row: &[f64], i: usize) -> f64 {
    let li = row[i];
    let max = row.iter().cloned().fold(f64::MIN, f64::max);
    if max <= li {
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &l)| (l - li).exp())
            .sum();
        rest.ln_1p()
    } else {
        max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - li
    }
}

/// Summed InfoNCE over the batch; the other keys are the negatives.
pub fn info_nce(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_nce(q, k, tau)?;
    Ok(logits(q, k, tau)
        .iter()
        .enumerate()
        .map(|(i, row)| row_loss(row, i))
        .sum())
}

/// Loss and its cotangent with respect to the queries (keys get none).
pub fn info_nce_with_grad(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    check_nce(q, k, tau)?;
    let lg = logits(q, k, tau);
    let d = q[0].len();
    let mut loss = 0.0;
    let mut dq = vec![vec![0.0; d]; q.len()];
    for (i, row) in lg.iter().enumerate() {
        loss += row_loss(row, i);
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, kj) in k.iter().enumerate() {
            let g = e[j] / z - if i == j { 1.0 } else { 0.0 };
            for (a, b) in dq[i].iter_mut().zip(kj) {
                *a += g * b / tau;
            }
        }
    }
    Ok((loss, dq))
}

// ---------------------------------------------------------------------------
// momentum contrast state

#[derive(Clone, Debug)]
pub struct MocoState {
    pub encoder: Encoder,
    pub query: ParamStore,
    pub key: ParamStore,
    pub momentum: f64,
    pub tau: f64,
    pub optim: Adam,
}

impl MocoState {
    /// Fresh query encoder with the key encoder as an exact copy.
    pub fn new(cfg: EncoderConfig, momentum: f64, tau: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidArgument(format!("momentum must be in (0, 1), got {momentum}")));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        let encoder = Encoder::new("enc", cfg)?;
        let mut query = ParamStore::new();
        encoder.init(&mut query, rng)?;
        let key = query.clone();
        Ok(Self {
            encoder,
            query,
            key,
            momentum,
            tau,
            optim: Adam::new(),
        })
    }
}

/// `key ← m·key + (1−m)·query` for every trainable parameter.
pub fn momentum_update(query: &ParamStore, key: &mut ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("momentum must be in [0, 1], got {m}")));
    }
    let names: Vec<String> = key
        .names()
        .filter(|n| !is_buffer(n))
        .map(str::to_owned)
        .collect();
    for name in names {
        let q = query.value(&name)?;
        let k = key.value_mut(&name)?;
        k.ensure_shape(q.shape(), "momentum update")?;
        for (a, b) in k.data_mut().iter_mut().zip(q.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// One contrastive update from matched query/key subvolume batches, where
/// pair `i` shares a degradation profile and pairs differ across `i`.
pub fn moco_train_step(
    state: &mut MocoState,
    queries: &[NdArray],
    keys: &[NdArray],
    lr: f64,
) -> Result<f64> {
    moco_train_step_grouped(state, &[(queries.to_vec(), keys.to_vec())], lr)
}

/// Contrastive update averaged over independent groups. Each group is its
/// own InfoNCE batch (negatives never cross groups, batch statistics are per
/// group); the returned loss is the group mean.
pub fn moco_train_step_grouped(
    state: &mut MocoState,
    groups: &[(Vec<NdArray>, Vec<NdArray>)],
    lr: f64,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no contrastive groups".into()));
    }
    let enc = state.encoder.clone();
    let scale = 1.0 / groups.len() as f64;
    state.query.zero_grads();
    let mut total = 0.0;
    let mut caches = Vec::with_capacity(groups.len());
    for (queries, keys) in groups {
        let (q, qcache) = enc.forward(&state.query, queries, true)?;
        let (k, kcache) = enc.forward(&state.key, keys, true)?;
        let (loss, dq) = info_nce_with_grad(&q, &k, state.tau)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: state.optim.step as usize,
                context: "contrastive loss".into(),
            });
        }
        total += loss * scale;
        let dq: Vec<Vec<f64>> = dq.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        enc.backward(&mut state.query, &qcache, &dq)?;
        caches.push((qcache, kcache));
    }
    state.optim.step(&mut state.query, lr)?;
    for (qcache, kcache) in &caches {
        enc.commit_running_stats(&mut state.query, qcache)?;
        enc.commit_running_stats(&mut state.key, kcache)?;
    }
    momentum_update(&state.query, &mut state.key, state.momentum)?;
    debug_assert!(state.key.grads_are_zero());
    Ok(total)
}

/// Mean pairwise cosine similarity within and across groups of embeddings.
pub fn group_similarity(groups: &[Vec<Vec<f64>>]) -> (f64, f64) {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb).max(1e-12)
    };
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for (g, ga) in groups.iter().enumerate() {
        for (i, a) in ga.iter().enumerate() {
            for b in &ga[i + 1..] {
                intra += cos(a, b);
                ni += 1;
            }
            for gb in &groups[g + 1..] {
                for b in gb {
                    inter += cos(a, b);
                    nx += 1;
                }
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_embeddings_give_n_log_n() {
        for n in 2..6 {
            let e = vec![vec![0.6, 0.8]; n];
            let l = info_nce(&e, &e, 0.07).unwrap();
            assert!((l - n as f64 * (n as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn dominant_positives_vanish() {
        let q = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let k = q.clone();
        let l = info_nce(&q, &k, 0.07).unwrap();
        let expect = 2.0 * (-2.0f64 / 0.07).exp().ln_1p();
        assert!((l - expect).abs() < 1e-20);
        assert!(l > 0.0 && l < 1e-12);
    }

    #[test]
    fn bad_arguments() {
        let e = vec![vec![1.0]];
        assert!(info_nce(&e, &e, 0.07).is_err());
        let e2 = vec![vec![1.0], vec![0.0]];
        assert!(info_nce(&e2, &e2, 0.0).is_err());
    }

    #[test]
    fn ema_closed_form() {
        let mut q = ParamStore::new();
        q.insert("w", NdArray::scalar(2.0)).unwrap();
        let mut k = ParamStore::new();
        k.insert("w", NdArray::scalar(-1.0)).unwrap();
        momentum_update(&q, &mut k, 0.9).unwrap();
        momentum_update(&q, &mut k, 0.9).unwrap();
        let expect = 0.81 * -1.0 + 0.19 * 2.0;
        assert!((k.value("w").unwrap().data()[0] - expect).abs() < 1e-15);
        momentum_update(&q, &mut k, 1.0).unwrap();
        assert!((k.value("w").unwrap().data()[0] - expect).abs() < 1e-15);
        momentum_update(&q, &mut k, 0.0).unwrap();
        assert_eq!(k.value("w").unwrap().data()[0], 2.0);
    }

    #[test]
    fn unit_norm_and_eval_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new("e", EncoderConfig { channels: 4, blocks: 2, embed_dim: 5 }).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng).unwrap();
        let x = uniform(&[4, 1, 8, 8], 1.0, &mut rng).map(|v| v.abs());
        let a = enc.encode(&store, &x).unwrap();
        assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a, enc.encode(&store, &x).unwrap());
        assert!(enc.encode(&store, &NdArray::zeros(&[3, 1, 8, 8])).is_err());
    }
}
