use isoscan_core::checkpoint::{encoder_checkpoint, model_checkpoint, round_to_f32, Checkpoint};
use isoscan_core::diffcore::{NdArray, ParamStore};
use isoscan_core::moco::{Encoder, EncoderConfig};
use isoscan_core::network::{random_embedding, Model, ModelConfig};
use isoscan_core::optim::{Adam, Schedule};
use isoscan_core::reconstruct::{upsample_nearest_h, Axis, Reconstructor, TileConfig};
use isoscan_core::train::{
    curve_csv, encoder_window, train_stage1, train_stage2, Stage1, Stage2, TrainConfig,
};
use isoscan_core::volume::{generate_phantom, transpose_axial_to_h, transpose_h_to_axial, Volume};
use isoscan_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model_cfg() -> ModelConfig {
    ModelConfig {
        channels: 4,
        groups: 1,
        blocks: 1,
        states: 2,
        embed_dim: 4,
        dwam_hidden: 3,
        ..ModelConfig::default()
    }
}

fn small_train_cfg(dir: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.seed = 31;
    cfg.model = small_model_cfg();
    cfg.moco.encoder = EncoderConfig {
        channels: 4,
        blocks: 1,
        embed_dim: 4,
    };
    cfg.moco.crop = [4, 8, 8];
    cfg.moco.phantom_dims = [8, 16, 16];
    cfg.moco.batch = 3;
    cfg.moco.steps = 4;
    cfg.moco.checkpoint_every = 2;
    cfg.schedule = Schedule {
        base_lr: 1e-3,
        warmup_epochs: 1,
        total_epochs: 3,
    };
    cfg.data.phantom_dims = [8, 16, 16];
    cfg.data.phantoms = 2;
    cfg.data.crop = [4, 16, 8];
    cfg.data.batch = 2;
    cfg.data.steps_per_epoch = 2;
    cfg.data.val_crops = 2;
    cfg
}

fn model_and_params(seed: u64) -> (Model, ParamStore) {
    let model = Model::new(small_model_cfg()).unwrap();
    let params = model.init(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (model, params)
}

#[test]
fn checkpoint_roundtrip_is_bitwise_for_f32_stores() {
    let (model, mut params) = model_and_params(1);
    round_to_f32(&mut params);
    let mut adam = Adam::new();
    for (_, p) in params.iter_mut() {
        p.grad = p.value.map(|v| v * 0.5 + 0.25);
    }
    adam.step(&mut params, 1e-3).unwrap();
    round_to_f32(&mut params);
    let ck = model_checkpoint(&model, &params, Some(&adam), serde_json::json!({"note": "x"})).unwrap();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.header.step, 1);
    let (m2, p2) = back.into_model().unwrap();
    assert_eq!(m2.cfg, model.cfg);
    for (n, p) in params.iter() {
        assert_eq!(p2.value(n).unwrap(), &p.value, "{n}");
    }
    let restored = back.optim().unwrap();
    assert_eq!(restored.step, 1);
}

#[test]
fn loading_validates_names_shapes_and_kind() {
    let (model, params) = model_and_params(2);
    let ck = model_checkpoint(&model, &params, None, serde_json::json!({})).unwrap();
    assert!(matches!(ck.into_encoder(), Err(Error::Checkpoint(_))));

    let mut wrong_shape = ck.clone();
    let name = wrong_shape.tensors.keys().next().unwrap().clone();
    wrong_shape.tensors.insert(name, NdArray::zeros(&[1, 2, 3]));
    assert!(matches!(wrong_shape.into_model(), Err(Error::Checkpoint(_))));

    let mut missing = ck.clone();
    let name = missing.tensors.keys().last().unwrap().clone();
    missing.tensors.remove(&name);
    assert!(matches!(missing.into_model(), Err(Error::Checkpoint(_))));

    let mut extra = ck;
    extra.tensors.insert("stray".into(), NdArray::zeros(&[1]));
    assert!(matches!(extra.into_model(), Err(Error::Checkpoint(_))));

    let enc = Encoder::new("enc", EncoderConfig { channels: 4, blocks: 1, embed_dim: 4 }).unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let ck = encoder_checkpoint(&enc, &store, None, serde_json::json!({})).unwrap();
    let (e2, s2) = ck.into_encoder().unwrap();
    assert_eq!(e2.cfg, enc.cfg);
    assert_eq!(s2.len(), store.len());
    assert_eq!(encoder_window(&ck), isoscan_core::moco::MIN_ENCODER_DIMS);
}

/// Zeroing the state-space output projections leaves a purely local model,
/// whose tiled evaluation must match whole-volume evaluation.
fn local_model() -> (Model, ParamStore) {
    let (model, mut params) = model_and_params(4);
    let names: Vec<String> = params.names().filter(|n| n.contains(".vemm.out.")).map(str::to_owned).collect();
    assert!(!names.is_empty());
    for n in names {
        params.value_mut(&n).unwrap().fill(0.0);
    }
    (model, params)
}

#[test]
fn tiled_matches_whole_volume_for_a_local_model() {
    let (model, params) = local_model();
    let x = generate_phantom([12, 20, 24], 5).unwrap();
    let d = random_embedding(4, &mut ChaCha8Rng::seed_from_u64(6));
    let whole = Reconstructor {
        model: &model,
        params: &params,
        tiles: TileConfig::default(),
    }
    .whole(&x, &d)
    .unwrap();
    for tile in [[6, 10, 12], [8, 12, 16], [12, 20, 24]] {
        let r = Reconstructor {
            model: &model,
            params: &params,
            tiles: TileConfig {
                tile,
                overlap: 4,
                halo: 8,
            },
        };
        let tiled = r.tiled(&x, &d).unwrap();
        let diff = whole.iter().zip(&tiled).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-4, "tile {tile:?}: {diff}");
    }
}

#[test]
fn tiling_is_independent_of_thread_count() {
    let (model, params) = model_and_params(7);
    let x = generate_phantom([8, 16, 20], 8).unwrap();
    let d = random_embedding(4, &mut ChaCha8Rng::seed_from_u64(9));
    let r = Reconstructor {
        model: &model,
        params: &params,
        tiles: TileConfig {
            tile: [4, 8, 8],
            overlap: 2,
            halo: 2,
        },
    };
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| r.tiled(&x, &d).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn axis_contracts_and_transpose_commutation() {
    let (model, params) = model_and_params(10);
    let d = random_embedding(4, &mut ChaCha8Rng::seed_from_u64(11));
    let r = Reconstructor {
        model: &model,
        params: &params,
        tiles: TileConfig::default(),
    };
    let x = Volume::from_fn([4, 16, 16], [2.0, 1.0, 1.0], |f, y, w| ((f * 7 + y * 3 + w) % 11) as f32 / 10.0).unwrap();
    let yh = r.reconstruct(&x, &d, Axis::H).unwrap();
    assert_eq!(yh.dims(), [4, 32, 16]);
    let yz = r.reconstruct(&x, &d, Axis::Z).unwrap();
    assert_eq!(yz.dims(), [8, 16, 16]);
    let via_h = transpose_h_to_axial(&r.reconstruct(&transpose_axial_to_h(&x), &d, Axis::H).unwrap());
    let diff = yz
        .data()
        .iter()
        .zip(via_h.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff < 1e-6, "{diff}");
    assert!(yz.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn nearest_baseline_shape() {
    let x = generate_phantom([8, 16, 16], 1).unwrap();
    assert_eq!(upsample_nearest_h(&x, 2).unwrap().dims(), [8, 32, 16]);
}

#[test]
fn stage1_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_cfg(dir.path());
    let mut a = Stage1::new(cfg.clone()).unwrap();
    let mut b = Stage1::new(cfg.clone()).unwrap();
    for _ in 0..2 {
        assert_eq!(a.step().unwrap(), b.step().unwrap());
    }
    let ck = Checkpoint::from_bytes(&a.checkpoint().unwrap().to_bytes().unwrap()).unwrap();
    let mut c = Stage1::resume(cfg, &ck).unwrap();
    assert_eq!(c.step_count(), 2);
    let (la, lc) = (a.step().unwrap(), c.step().unwrap());
    assert!((la - lc).abs() < 1e-6, "{la} vs {lc}");
}

#[test]
fn stage2_guards_the_frozen_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_cfg(dir.path());
    let enc = Stage1::new(cfg.clone()).unwrap().checkpoint().unwrap();
    let mut run = Stage2::new(cfg.clone(), &enc).unwrap();
    let before = run.encoder_checksum();
    run.step().unwrap();
    assert_eq!(run.encoder_checksum(), before);
    let name = run.encoder_params.names().next().unwrap().to_owned();
    run.encoder_params.value_mut(&name).unwrap().data_mut()[0] += 1.0;
    assert!(matches!(run.step(), Err(Error::Contract(_))));

    // an encoder whose embedding size disagrees with the model is rejected
    let mut other = cfg.clone();
    other.moco.encoder.embed_dim = 5;
    other.model.embed_dim = 5;
    let wrong = Stage1::new(other).unwrap().checkpoint().unwrap();
    assert!(Stage2::new(cfg, &wrong).is_err());
}

#[test]
fn training_drivers_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_cfg(dir.path());
    let r1 = train_stage1(&cfg, None).unwrap();
    assert_eq!(r1.losses.len(), 4);
    let csv = std::fs::read_to_string(&r1.curve).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,lr,loss,psnr_val,ssim_val");
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(encoder_window(&Checkpoint::load(&r1.checkpoint).unwrap()), [4, 8, 8]);

    let r2 = train_stage2(&cfg, &r1.checkpoint, None).unwrap();
    assert_eq!(r2.losses.len(), 6);
    assert_eq!(r2.encoder_checksum_before, r2.encoder_checksum_after);
    for e in 1..=3 {
        assert!(dir.path().join(format!("model_epoch{e}.vemc")).exists());
    }
    // validation rows appear once per epoch
    let rows = curve_csv(&r2.points);
    let with_val = rows.lines().skip(1).filter(|l| !l.ends_with(",,")).count();
    assert_eq!(with_val, 3);

    // resuming from the epoch-2 checkpoint replays the final epoch
    let mid = dir.path().join("model_epoch2.vemc");
    let resumed = train_stage2(&cfg, &r1.checkpoint, Some(&mid)).unwrap();
    assert_eq!(resumed.losses.len(), 2);
    for (a, b) in resumed.losses.iter().zip(&r2.losses[4..]) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    let missing = dir.path().join("nope.vemc");
    assert!(train_stage2(&cfg, &missing, None).is_err());
}
