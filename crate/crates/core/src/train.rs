//! Two-stage training: contrastive pre-training of the degradation encoder,
//! then the reconstruction network with that encoder frozen.
//!
//! Every random draw is seeded from `(seed, purpose, index)`, so a run is a
//! pure function of its config and a resumed run continues exactly where a
//! checkpoint left it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{encoder_checkpoint, model_checkpoint, Checkpoint, KEY_PREFIX};
use crate::degradation::{
    degrade, make_training_pair, sample_moco_pair, DegradationProfile, DegradationRanges,
};
use crate::diffcore::{NdArray, ParamStore};
use crate::error::{Error, Result};
use crate::losses::{ssim, total_loss_with_grad, SsimConfig};
use crate::moco::{
    group_similarity, moco_train_step_grouped, Encoder, EncoderConfig, MocoState, MIN_ENCODER_DIMS,
};
use crate::network::{Model, ModelConfig};
use crate::reconstruct::{embed, upsample_nearest_h};
use crate::volume::{generate_phantom, load_volume, SubvolumeSpec, Volume, MIN_PHANTOM_DIMS};

pub use crate::optim::{lr_at, Adam, Schedule};

// seed purposes
const TAG_PHANTOM: u64 = 1;
const TAG_VAL: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_MOCO_PHANTOM: u64 = 5;
const TAG_MOCO_PROFILE: u64 = 6;
const TAG_MOCO_CROP: u64 = 7;
const TAG_EVAL: u64 = 8;

/// Decorrelated child seed for `(seed, tag, index)` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_add(1).wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dims of generated training phantoms (used when `volumes` is empty).
    pub phantom_dims: [usize; 3],
    pub phantoms: usize,
    /// VEMV files; with more than one, the last is held out for validation.
    pub volumes: Vec<PathBuf>,
    /// High-resolution crop `(F, H, W)`; the model input is `(F, H/s, W)`.
    pub crop: [usize; 3],
    pub batch: usize,
    pub steps_per_epoch: usize,
    pub val_crops: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            phantom_dims: [16, 64, 64],
            phantoms: 4,
            volumes: Vec::new(),
            crop: [8, 32, 32],
            batch: 2,
            steps_per_epoch: 20,
            val_crops: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MocoConfig {
    pub encoder: EncoderConfig,
    pub momentum: f64,
    pub tau: f64,
    pub lr: f64,
    pub steps: u64,
    /// Volumes (distinct profiles) per step.
    pub batch: usize,
    /// Encoder crop in degraded voxels; stage 2 embeds a centered crop of
    /// the same shape.
    pub crop: [usize; 3],
    pub phantom_dims: [usize; 3],
    /// Fixed profile set cycled through each step; empty means draw `batch`
    /// profiles from the degradation ranges every step.
    pub profiles: Vec<DegradationProfile>,
    /// Independent contrastive groups averaged per step, each from its own
    /// phantom.
    pub groups: usize,
    pub checkpoint_every: u64,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            momentum: 0.999,
            tau: 0.07,
            lr: 1e-3,
            steps: 200,
            batch: 4,
            crop: [4, 8, 8],
            phantom_dims: [16, 32, 32],
            profiles: Vec::new(),
            groups: 1,
            checkpoint_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub moco: MocoConfig,
    pub degradation: DegradationRanges,
    pub schedule: Schedule,
    pub seed: u64,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    /// Stops stage 2 early after this many optimizer steps in total.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            moco: MocoConfig::default(),
            degradation: DegradationRanges::default(),
            schedule: Schedule::default(),
            seed: 0,
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs"),
            max_steps: None,
        }
    }
}

/// The four profiles of the contrastive smoke run: blur σ ∈ {0.5, 1.5, 2.5,
/// 4} with a light noise floor of 0.01.
pub fn smoke_profiles(scale: usize) -> Vec<DegradationProfile> {
    [(0.5, 0.01), (1.5, 0.01), (2.5, 0.01), (4.0, 0.01)]
        .into_iter()
        .map(|(blur_sigma, noise_sigma)| DegradationProfile {
            filter_size: 8,
            blur_sigma,
            scale,
            noise_sigma,
            seed: 0,
        })
        .collect()
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let s = self.model.scale;
        if self.degradation.scale != s {
            return bad(format!("degradation scale {} != model scale {s}", self.degradation.scale));
        }
        if self.model.embed_dim != self.moco.encoder.embed_dim {
            return bad(format!(
                "model embedding {} != encoder embedding {}",
                self.model.embed_dim, self.moco.encoder.embed_dim
            ));
        }
        let d = &self.data;
        if d.crop[1] % s != 0 {
            return bad(format!("crop height {} is not a multiple of the scale {s}", d.crop[1]));
        }
        if d.crop.contains(&0) || d.batch == 0 || d.steps_per_epoch == 0 || d.val_crops == 0 {
            return bad("crop, batch, steps_per_epoch and val_crops must be positive".into());
        }
        if d.volumes.is_empty() {
            if d.phantoms == 0 {
                return bad("need at least one phantom or volume".into());
            }
            if (0..3).any(|a| d.crop[a] > d.phantom_dims[a] || d.phantom_dims[a] < MIN_PHANTOM_DIMS[a]) {
                return bad(format!(
                    "crop {:?} must fit phantom dims {:?} (minimum {MIN_PHANTOM_DIMS:?})",
                    d.crop, d.phantom_dims
                ));
            }
        }
        let low_crop = [d.crop[0], d.crop[1] / s, d.crop[2]];
        if (0..3).any(|a| low_crop[a] < MIN_ENCODER_DIMS[a]) {
            return bad(format!(
                "degraded crop {low_crop:?} is below the encoder minimum {MIN_ENCODER_DIMS:?}"
            ));
        }
        let m = &self.moco;
        if (0..3).any(|a| m.crop[a] < MIN_ENCODER_DIMS[a]) {
            return bad(format!("encoder crop {:?} below minimum {MIN_ENCODER_DIMS:?}", m.crop));
        }
        let low: [usize; 3] = [m.phantom_dims[0], m.phantom_dims[1] / s, m.phantom_dims[2]];
        if (0..3).any(|a| m.crop[a] > low[a] || m.phantom_dims[a] < MIN_PHANTOM_DIMS[a]) {
            return bad(format!(
                "encoder crop {:?} must fit degraded phantom dims {low:?}",
                m.crop
            ));
        }
        if m.groups == 0 {
            return bad("moco.groups must be at least 1".into());
        }
        if m.batch < 2 && m.profiles.len() < 2 {
            return bad("contrastive batches need at least 2 volumes".into());
        }
        if m.profiles.iter().any(|p| p.scale != s) {
            return bad("fixed profiles must use the model scale".into());
        }
        Ok(())
    }

    fn prepare_output(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir)?;
        Ok(())
    }
}

/// One row of a loss curve: `step,lr,loss,psnr_val,ssim_val`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub val: Option<(f64, f64)>,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("step,lr,loss,psnr_val,ssim_val\n");
    for p in points {
        let (a, b) = p
            .val
            .map_or((String::new(), String::new()), |(x, y)| (x.to_string(), y.to_string()));
        let _ = writeln!(s, "{},{},{},{a},{b}", p.step, p.lr, p.loss);
    }
    s
}

// ---------------------------------------------------------------------------
// stage 1

/// Contrastive pre-training of the degradation encoder.
pub struct Stage1 {
    pub cfg: TrainConfig,
    pub state: MocoState,
}

impl Stage1 {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_INIT, 1));
        let m = &cfg.moco;
        let state = MocoState::new(m.encoder.clone(), m.momentum, m.tau, &mut rng)?;
        Ok(Self { cfg, state })
    }

    /// Continues from a stage-1 checkpoint written by [`Self::checkpoint`].
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut me = Self::new(cfg)?;
        let (encoder, query) = ckpt.into_encoder()?;
        if encoder.cfg != me.cfg.moco.encoder {
            return Err(Error::Checkpoint("encoder config differs from the run config".into()));
        }
        let key = ckpt.group(KEY_PREFIX)?;
        me.state.query.copy_values_from(&query)?;
        me.state.key.copy_values_from(&key)?;
        me.state.optim = ckpt
            .optim()
            .ok_or_else(|| Error::Checkpoint("stage-1 checkpoint has no optimizer state".into()))?;
        Ok(me)
    }

    pub fn step_count(&self) -> u64 {
        self.state.optim.step
    }

    fn profiles_for(&self, t: u64, g: u64) -> Vec<DegradationProfile> {
        let m = &self.cfg.moco;
        let index = t * 1024 + g;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, TAG_MOCO_PROFILE, index));
        let mut v: Vec<DegradationProfile> = if m.profiles.is_empty() {
            (0..m.batch).map(|_| self.cfg.degradation.sample(&mut rng)).collect()
        } else {
            m.profiles.clone()
        };
        for p in v.iter_mut() {
            p.seed = rng.random();
        }
        v
    }

    /// Query and key crops of group `g` at step `t`: one phantom degraded by
    /// every profile, with an independent pair of crops per profile.
    pub fn batch(&self, t: u64, g: u64) -> Result<(Vec<NdArray>, Vec<NdArray>)> {
        let m = &self.cfg.moco;
        let index = t * 1024 + g;
        let phantom = generate_phantom(m.phantom_dims, derive_seed(self.cfg.seed, TAG_MOCO_PHANTOM, index))?;
        let (mut q, mut k) = (Vec::new(), Vec::new());
        for (i, p) in self.profiles_for(t, g).iter().enumerate() {
            let parent = degrade(&phantom, p)?;
            let seed = derive_seed(self.cfg.seed, TAG_MOCO_CROP, index * 1024 + i as u64);
            let pair = sample_moco_pair(&parent, m.crop, seed, false)?;
            q.push(pair.query.to_feature());
            k.push(pair.key.to_feature());
        }
        Ok((q, k))
    }

    pub fn step(&mut self) -> Result<f64> {
        let t = self.step_count();
        let groups = (0..self.cfg.moco.groups as u64)
            .map(|g| self.batch(t, g))
            .collect::<Result<Vec<_>>>()?;
        let loss = moco_train_step_grouped(&mut self.state, &groups, self.cfg.moco.lr)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t as usize, loss });
        }
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let extra = json!({
            "stage": 1,
            "momentum": self.state.momentum,
            "tau": self.state.tau,
            "window": self.cfg.moco.crop,
        });
        Ok(encoder_checkpoint(&self.state.encoder, &self.state.query, Some(&self.state.optim), extra)?
            .with_group(KEY_PREFIX, &self.state.key))
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Report {
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

/// Runs stage 1 to `moco.steps`, writing `encoder.vemc` and `moco_loss.csv`.
pub fn train_stage1(cfg: &TrainConfig, resume: Option<&Path>) -> Result<Stage1Report> {
    cfg.prepare_output()?;
    let mut run = match resume {
        Some(p) => Stage1::resume(cfg.clone(), &Checkpoint::load(p)?)?,
        None => Stage1::new(cfg.clone())?,
    };
    let ckpt_path = cfg.output_dir.join("encoder.vemc");
    let curve_path = cfg.output_dir.join("moco_loss.csv");
    let mut points = Vec::new();
    let mut losses = Vec::new();
    while run.step_count() < cfg.moco.steps {
        let t = run.step_count();
        let loss = run.step()?;
        losses.push(loss);
        points.push(CurvePoint {
            step: t,
            lr: cfg.moco.lr,
            loss,
            val: None,
        });
        if cfg.moco.checkpoint_every > 0 && (t + 1) % cfg.moco.checkpoint_every == 0 {
            run.checkpoint()?.save(&ckpt_path)?;
        }
    }
    run.checkpoint()?.save(&ckpt_path)?;
    std::fs::write(&curve_path, curve_csv(&points))?;
    Ok(Stage1Report {
        losses,
        checkpoint: ckpt_path,
        curve: curve_path,
    })
}

/// Embedding window recorded in a stage-1 checkpoint, or the encoder minimum.
pub fn encoder_window(ckpt: &Checkpoint) -> [usize; 3] {
    serde_json::from_value(ckpt.header.extra["window"].clone()).unwrap_or(MIN_ENCODER_DIMS)
}

/// Mean intra- and inter-profile cosine similarity of eval-mode embeddings:
/// `per_profile` crops per profile, drawn from fresh phantoms.
pub fn profile_separation(
    encoder: &Encoder,
    params: &ParamStore,
    profiles: &[DegradationProfile],
    moco: &MocoConfig,
    per_profile: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut groups = vec![Vec::new(); profiles.len()];
    for j in 0..per_profile {
        let phantom = generate_phantom(moco.phantom_dims, derive_seed(seed, TAG_EVAL, j as u64))?;
        for (g, p) in profiles.iter().enumerate() {
            let p = DegradationProfile {
                seed: derive_seed(seed, TAG_EVAL, (1000 + j * 16 + g) as u64),
                ..*p
            };
            let parent = degrade(&phantom, &p)?;
            let pair = sample_moco_pair(&parent, moco.crop, p.seed, false)?;
            groups[g].push(encoder.encode(params, &pair.query.to_feature())?);
        }
    }
    Ok(group_similarity(&groups))
}

// ---------------------------------------------------------------------------
// stage 2

/// A held-out example with its embedding precomputed.
#[derive(Clone, Debug)]
pub struct ValExample {
    pub x: Volume,
    pub y: Volume,
    pub d: Vec<f64>,
}

fn load_sources(cfg: &TrainConfig) -> Result<(Vec<Volume>, Vec<Volume>)> {
    let d = &cfg.data;
    if d.volumes.is_empty() {
        let train = (0..d.phantoms)
            .map(|i| generate_phantom(d.phantom_dims, derive_seed(cfg.seed, TAG_PHANTOM, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let val = vec![generate_phantom(d.phantom_dims, derive_seed(cfg.seed, TAG_VAL, 0))?];
        return Ok((train, val));
    }
    let mut vols = Vec::new();
    for p in &d.volumes {
        let v = load_volume(std::fs::File::open(p)?)?;
        if (0..3).any(|a| d.crop[a] > v.dims()[a]) {
            return Err(Error::InvalidArgument(format!(
                "{}: dims {:?} smaller than the crop {:?}",
                p.display(),
                v.dims(),
                d.crop
            )));
        }
        vols.push(v);
    }
    // with a single volume, validation crops come from the same volume
    let val = if vols.len() > 1 {
        vec![vols.pop().expect("non-empty")]
    } else {
        vols.clone()
    };
    Ok((vols, val))
}

fn sample_pair(
    src: &[Volume],
    crop: [usize; 3],
    ranges: &DegradationRanges,
    seed: u64,
) -> Result<crate::degradation::TrainingPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = &src[rng.random_range(0..src.len())];
    let dims = v.dims();
    let origin: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=dims[a] - crop[a]));
    let profile = ranges.sample(&mut rng);
    make_training_pair(v, &SubvolumeSpec::new(origin, crop), &profile)
}

/// Mean PSNR and SSIM of `(pred, target)` volume pairs.
fn mean_metrics(pairs: &[(Vec<f64>, &Volume)]) -> Result<(f64, f64)> {
    let cfg = SsimConfig::default();
    let (mut p, mut s) = (0.0, 0.0);
    for (pred, y) in pairs {
        let clamped: Vec<f64> = pred.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let t = y.to_f64();
        p += crate::losses::psnr(&t, &clamped, cfg.data_range)?;
        s += ssim(&t, &clamped, y.dims(), &cfg)?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, s / n))
}

/// Reconstruction training with a frozen degradation encoder.
pub struct Stage2 {
    pub cfg: TrainConfig,
    pub model: Model,
    pub params: ParamStore,
    pub optim: Adam,
    pub encoder: Encoder,
    pub encoder_params: ParamStore,
    encoder_checksum: u64,
    train: Vec<Volume>,
    pub val: Vec<ValExample>,
}

impl Stage2 {
    pub fn new(cfg: TrainConfig, encoder_ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let (encoder, encoder_params) = encoder_ckpt.into_encoder()?;
        if encoder.cfg.embed_dim != cfg.model.embed_dim {
            return Err(Error::Checkpoint(format!(
                "encoder embeds to {}, model expects {}",
                encoder.cfg.embed_dim, cfg.model.embed_dim
            )));
        }
        let model = Model::new(cfg.model.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_INIT, 2));
        let params = model.init(&mut rng)?;
        let (train, val_src) = load_sources(&cfg)?;
        let mut val = Vec::with_capacity(cfg.data.val_crops);
        for i in 0..cfg.data.val_crops {
            let pair = sample_pair(
                &val_src,
                cfg.data.crop,
                &cfg.degradation,
                derive_seed(cfg.seed, TAG_VAL, 100 + i as u64),
            )?;
            let d = embed(&encoder, &encoder_params, &pair.x, cfg.moco.crop)?;
            val.push(ValExample { x: pair.x, y: pair.y, d });
        }
        let encoder_checksum = encoder_params.checksum();
        Ok(Self {
            cfg,
            model,
            params,
            optim: Adam::new(),
            encoder,
            encoder_params,
            encoder_checksum,
            train,
            val,
        })
    }

    /// Continues from a model checkpoint written by [`Self::checkpoint`].
    pub fn resume(cfg: TrainConfig, encoder_ckpt: &Checkpoint, model_ckpt: &Checkpoint) -> Result<Self> {
        let mut me = Self::new(cfg, encoder_ckpt)?;
        let (model, params) = model_ckpt.into_model()?;
        if model.cfg != me.cfg.model {
            return Err(Error::Checkpoint("model config differs from the run config".into()));
        }
        me.params.copy_values_from(&params)?;
        me.optim = model_ckpt
            .optim()
            .ok_or_else(|| Error::Checkpoint("model checkpoint has no optimizer state".into()))?;
        Ok(me)
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    pub fn encoder_checksum(&self) -> u64 {
        self.encoder_params.checksum()
    }

    pub fn total_steps(&self) -> u64 {
        let full = (self.cfg.schedule.total_epochs * self.cfg.data.steps_per_epoch) as u64;
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    /// Learning rate of step `t`, with epochs measured in steps.
    pub fn lr(&self, t: u64) -> f64 {
        lr_at((t + 1) as f64 / self.cfg.data.steps_per_epoch as f64, &self.cfg.schedule)
    }

    fn check_frozen(&self) -> Result<()> {
        if self.encoder_params.checksum() != self.encoder_checksum {
            return Err(Error::Contract("frozen encoder parameters changed".into()));
        }
        if !self.encoder_params.grads_are_zero() {
            return Err(Error::Contract("frozen encoder accumulated cotangents".into()));
        }
        Ok(())
    }

    /// One optimizer step; returns the batch-mean loss.
    pub fn step(&mut self) -> Result<f64> {
        let t = self.step_count();
        let b = self.cfg.data.batch;
        self.params.zero_grads();
        let mut loss = 0.0;
        let ssim_cfg = SsimConfig::default();
        for i in 0..b {
            let seed = derive_seed(self.cfg.seed, TAG_SAMPLE, t * b as u64 + i as u64);
            let pair = sample_pair(&self.train, self.cfg.data.crop, &self.cfg.degradation, seed)?;
            let d = embed(&self.encoder, &self.encoder_params, &pair.x, self.cfg.moco.crop)?;
            let (yhat, cache) = self.model.forward_cached(&self.params, &pair.x.to_feature(), &d)?;
            let (l, g) = total_loss_with_grad(&pair.y.to_f64(), yhat.data(), pair.y.dims(), &ssim_cfg)?;
            if !l.is_finite() {
                return Err(Error::Diverged { step: t as usize, loss: l });
            }
            loss += l / b as f64;
            let dy = NdArray::new(yhat.shape(), g.iter().map(|v| v / b as f64).collect())?;
            self.model.backward(&mut self.params, &cache, &d, &dy)?;
        }
        self.check_frozen()?;
        let lr = self.lr(t);
        self.optim.step(&mut self.params, lr)?;
        self.check_frozen()?;
        Ok(loss)
    }

    /// Mean PSNR/SSIM of the model on the held-out crops.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let preds = self
            .val
            .iter()
            .map(|v| Ok((self.model.forward(&self.params, &v.x.to_feature(), &v.d)?.into_data(), &v.y)))
            .collect::<Result<Vec<_>>>()?;
        mean_metrics(&preds)
    }

    /// Mean PSNR/SSIM of nearest-neighbor upsampling on the held-out crops.
    pub fn baseline(&self) -> Result<(f64, f64)> {
        let preds = self
            .val
            .iter()
            .map(|v| Ok((upsample_nearest_h(&v.x, self.cfg.model.scale)?.to_f64(), &v.y)))
            .collect::<Result<Vec<_>>>()?;
        mean_metrics(&preds)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let extra = json!({"stage": 2, "encoder_checksum": self.encoder_checksum.to_string()});
        model_checkpoint(&self.model, &self.params, Some(&self.optim), extra)
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Report {
    pub losses: Vec<f64>,
    pub points: Vec<CurvePoint>,
    pub baseline: (f64, f64),
    pub final_val: (f64, f64),
    pub encoder_checksum_before: u64,
    pub encoder_checksum_after: u64,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

/// Runs stage 2, validating and writing `model_epoch{e}.vemc` after every
/// epoch, and `model.vemc` plus `train_loss.csv` at the end.
pub fn train_stage2(cfg: &TrainConfig, encoder_path: &Path, resume: Option<&Path>) -> Result<Stage2Report> {
    if !encoder_path.exists() {
        return Err(Error::Checkpoint(format!(
            "encoder checkpoint {} not found",
            encoder_path.display()
        )));
    }
    cfg.prepare_output()?;
    let enc = Checkpoint::load(encoder_path)?;
    let mut run = match resume {
        Some(p) => Stage2::resume(cfg.clone(), &enc, &Checkpoint::load(p)?)?,
        None => Stage2::new(cfg.clone(), &enc)?,
    };
    let before = run.encoder_checksum();
    let baseline = run.baseline()?;
    let spe = cfg.data.steps_per_epoch as u64;
    let total = run.total_steps();
    let mut points = Vec::new();
    let mut losses = Vec::new();
    let mut final_val = None;
    while run.step_count() < total {
        let t = run.step_count();
        let lr = run.lr(t);
        let loss = run.step()?;
        losses.push(loss);
        let done = t + 1 == total;
        let val = if (t + 1) % spe == 0 || done {
            let v = run.validate()?;
            final_val = Some(v);
            Some(v)
        } else {
            None
        };
        if (t + 1) % spe == 0 {
            run.checkpoint()?
                .save(cfg.output_dir.join(format!("model_epoch{}.vemc", (t + 1) / spe)))?;
        }
        points.push(CurvePoint { step: t, lr, loss, val });
    }
    let final_val = match final_val {
        Some(v) => v,
        None => run.validate()?,
    };
    let ckpt_path = cfg.output_dir.join("model.vemc");
    run.checkpoint()?.save(&ckpt_path)?;
    let curve_path = cfg.output_dir.join("train_loss.csv");
    std::fs::write(&curve_path, curve_csv(&points))?;
    Ok(Stage2Report {
        losses,
        points,
        baseline,
        final_val,
        encoder_checksum_before: before,
        encoder_checksum_after: run.encoder_checksum(),
        checkpoint: ckpt_path,
        curve: curve_path,
    })
}
