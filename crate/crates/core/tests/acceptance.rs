//! Acceptance criteria, run in sequence with pinned tolerances. Prints one
//! PASS/FAIL line per criterion and fails if any criterion fails.

use std::time::Instant;

use isoscan_core::checkpoint::Checkpoint;
use isoscan_core::checks::{grad_cases, lti_duality_error, parallel_scan_error, scan_integrity};
use isoscan_core::losses::{psnr, ssim, SsimConfig};
use isoscan_core::moco::{info_nce, EncoderConfig};
use isoscan_core::network::{Model, ModelConfig};
use isoscan_core::optim::Schedule;
use isoscan_core::train::{profile_separation, smoke_profiles, Stage1, Stage2, TrainConfig};
use isoscan_core::volume::{from_bytes, generate_phantom, to_bytes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn within(seconds: f64, budget: f64) -> bool {
    seconds < budget
}

fn c1_scan_integrity() -> Verdict {
    let t0 = Instant::now();
    let r = scan_integrity(64, false);
    let s = t0.elapsed().as_secs_f64();
    let (passed, detail) = match r {
        Ok(n) => (within(s, 5.0), format!("{n} (dims, branch) pairs exhaustive, {s:.2} s (< 5 s)")),
        Err(e) => (false, e),
    };
    Verdict {
        id: 1,
        title: "scan integrity",
        passed,
        detail,
    }
}

fn c2_ssm_duality() -> Verdict {
    let t0 = Instant::now();
    let d = lti_duality_error(50, 2).unwrap();
    let s = t0.elapsed().as_secs_f64();
    Verdict {
        id: 2,
        title: "SSM recurrence/convolution duality",
        passed: d < 1e-10 && within(s, 1.0),
        detail: format!("50 instances, max diff {d:.2e} (< 1e-10), {s:.3} s (< 1 s)"),
    }
}

fn c3_parallel_scan() -> Verdict {
    let t0 = Instant::now();
    let d = parallel_scan_error(20, 3).unwrap();
    let s = t0.elapsed().as_secs_f64();
    Verdict {
        id: 3,
        title: "parallel scan equivalence",
        passed: d < 1e-9 && within(s, 5.0),
        detail: format!("20 instances x blocks {{1,3,8,L}}, max diff {d:.2e} (< 1e-9), {s:.2} s (< 5 s)"),
    }
}

fn c4_gradients() -> Verdict {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut worst_op: f64 = 0.0;
    let mut model_err: f64 = 0.0;
    let cases = grad_cases();
    for c in &cases {
        let seeds = if c.name == "micro_model" { 1 } else { 5 };
        for seed in 0..seeds {
            let e = c.run(seed).unwrap().max_rel_err;
            if c.name == "micro_model" {
                model_err = model_err.max(e);
            } else if c.tolerance <= 1e-4 {
                worst_op = worst_op.max(e);
            }
            if e >= c.tolerance {
                failures.push(format!("{} seed {seed}: {e:.2e}", c.name));
            }
        }
    }
    let s = t0.elapsed().as_secs_f64();
    Verdict {
        id: 4,
        title: "gradient correctness",
        passed: failures.is_empty() && within(s, 60.0),
        detail: format!(
            "{} ops, worst per-op {worst_op:.2e} (< 1e-4), micro model {model_err:.2e} (< 1e-3), {s:.1} s (< 60 s){}",
            cases.len(),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    }
}

fn c5_metrics() -> Verdict {
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..3 * 20 * 20).map(|_| rng.random_range(0.0..1.0)).collect();
    let s_id = ssim(&x, &x, [3, 20, 20], &cfg).unwrap();
    // constant patches: only the luminance term survives
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let closed = (2.0 * 0.3 * 0.7 + c1) / (0.3f64.powi(2) + 0.7f64.powi(2) + c1);
    let s_patch = ssim(&vec![0.3; 256], &vec![0.7; 256], [1, 16, 16], &cfg).unwrap();
    let y: Vec<f64> = (0..500).map(|i| (i % 200) as f64 / 255.0).collect();
    let yh: Vec<f64> = y.iter().map(|v| v + 1.0 / 255.0).collect();
    let p = psnr(&y, &yh, 1.0).unwrap();
    let n = 8;
    let e: Vec<Vec<f64>> = vec![vec![0.6, 0.0, 0.8]; n];
    let nce = info_nce(&e, &e, 0.07).unwrap();
    let nlogn = n as f64 * (n as f64).ln();
    let ok = (s_id - 1.0).abs() <= 1e-12
        && (s_patch - 0.7241).abs() <= 1e-3
        && (s_patch - closed).abs() <= 1e-12
        && (p - 48.13).abs() <= 0.01
        && (nce - nlogn).abs() <= 1e-9;
    Verdict {
        id: 5,
        title: "metric closed forms",
        passed: ok,
        detail: format!(
            "ssim(x,x)={s_id:.15}, patch={s_patch:.6} (0.7241 ± 1e-3), psnr={p:.4} (48.13 ± 0.01), InfoNCE={nce:.12} vs N·lnN={nlogn:.12}"
        ),
    }
}

fn smoke_config(dir: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.model = ModelConfig::micro();
    let m = &mut cfg.moco;
    m.encoder = EncoderConfig {
        channels: 8,
        blocks: 2,
        embed_dim: cfg.model.embed_dim,
    };
    m.lr = 3e-3;
    m.momentum = 0.99;
    m.steps = 400;
    m.crop = [8, 16, 16];
    m.phantom_dims = [16, 32, 32];
    m.profiles = smoke_profiles(cfg.model.scale);
    cfg.schedule = Schedule {
        base_lr: 2e-3,
        warmup_epochs: 1,
        total_epochs: 20,
    };
    let d = &mut cfg.data;
    d.crop = [8, 16, 16];
    d.batch = 4;
    d.steps_per_epoch = 25;
    d.val_crops = 8;
    cfg
}

fn c6_moco(cfg: &TrainConfig) -> (Verdict, Checkpoint) {
    let t0 = Instant::now();
    let mut run = Stage1::new(cfg.clone()).unwrap();
    let losses: Vec<f64> = (0..cfg.moco.steps).map(|_| run.step().unwrap()).collect();
    let initial = losses[0];
    let tail = &losses[losses.len() - 25..];
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    let (intra, inter) = profile_separation(
        &run.state.encoder,
        &run.state.query,
        &cfg.moco.profiles,
        &cfg.moco,
        8,
        99,
    )
    .unwrap();
    let s = t0.elapsed().as_secs_f64();
    let ok = last < 0.5 * initial && intra - inter >= 0.05 && within(s, 300.0);
    let v = Verdict {
        id: 6,
        title: "MoCo smoke",
        passed: ok,
        detail: format!(
            "{} steps, loss {initial:.3} -> {last:.3} (mean of last 25; ratio {:.3} < 0.5), intra {intra:.3} - inter {inter:.3} = {:.3} (>= 0.05), {s:.0} s (< 300 s)",
            losses.len(),
            last / initial,
            intra - inter
        ),
    };
    (v, run.checkpoint().unwrap())
}

fn c7_c9_reconstruction(cfg: &TrainConfig, encoder: &Checkpoint) -> (Verdict, Verdict) {
    let t0 = Instant::now();
    let mut run = Stage2::new(cfg.clone(), encoder).unwrap();
    let before = run.encoder_checksum();
    let baseline = run.baseline().unwrap();
    let total = run.total_steps();
    let probe = 10;
    let mut losses = Vec::new();
    let mut probe_checksum = 0;
    while run.step_count() < total {
        losses.push(run.step().unwrap());
        if run.step_count() == probe {
            probe_checksum = run.params.checksum();
        }
    }
    let (p, s) = run.validate().unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let after = run.encoder_checksum();

    // determinism: an independent rerun reproduces the trajectory bitwise
    let mut again = Stage2::new(cfg.clone(), encoder).unwrap();
    let replay: Vec<f64> = (0..probe).map(|_| again.step().unwrap()).collect();
    let deterministic = replay == losses[..probe as usize] && again.params.checksum() == probe_checksum;

    let (dp, ds) = (p - baseline.0, s - baseline.1);
    let c7 = Verdict {
        id: 7,
        title: "reconstruction smoke",
        passed: total <= 500 && dp >= 0.5 && ds >= 0.01 && within(secs, 900.0) && deterministic,
        detail: format!(
            "{total} steps, model {p:.3} dB / {s:.4} vs nearest {:.3} dB / {:.4} on {} held-out crops: +{dp:.3} dB (>= 0.5), +{ds:.4} SSIM (>= 0.01), {secs:.0} s (< 900 s), rerun bitwise over {probe} steps: {deterministic}",
            baseline.0,
            baseline.1,
            run.val.len()
        ),
    };
    let c9 = Verdict {
        id: 9,
        title: "frozen encoder",
        passed: before == after,
        detail: format!("encoder checksum {before:016x} before, {after:016x} after {total} steps"),
    };
    (c7, c9)
}

fn c8_params() -> Verdict {
    let n = Model::param_count(&ModelConfig::default()).unwrap();
    Verdict {
        id: 8,
        title: "parameter accounting",
        passed: n < 2_000_000 && n > 100_000,
        detail: format!("default config: {n} parameters ({:.3} M; < 2 M, same order as 0.94 M)", n as f64 / 1e6),
    }
}

fn resume_cfg(dir: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.seed = 77;
    cfg.model = ModelConfig {
        channels: 4,
        groups: 1,
        blocks: 1,
        states: 2,
        embed_dim: 4,
        dwam_hidden: 3,
        ..ModelConfig::default()
    };
    cfg.moco.encoder = EncoderConfig {
        channels: 4,
        blocks: 1,
        embed_dim: 4,
    };
    cfg.moco.crop = [4, 8, 8];
    cfg.moco.phantom_dims = [8, 16, 16];
    cfg.moco.batch = 3;
    cfg.schedule = Schedule {
        base_lr: 1e-3,
        warmup_epochs: 1,
        total_epochs: 4,
    };
    cfg.data.phantom_dims = [8, 16, 16];
    cfg.data.phantoms = 2;
    cfg.data.crop = [4, 16, 8];
    cfg.data.batch = 2;
    cfg.data.steps_per_epoch = 2;
    cfg.data.val_crops = 2;
    cfg
}

fn c10_formats_and_resume(dir: &std::path::Path) -> Verdict {
    let v = generate_phantom([8, 16, 16], 10).unwrap();
    let vb = to_bytes(&v);
    let vemv = to_bytes(&from_bytes(&vb).unwrap()) == vb && from_bytes(&vb).unwrap() == v;

    let cfg = resume_cfg(dir);
    let k = 3;
    // stage 1
    let mut a = Stage1::new(cfg.clone()).unwrap();
    for _ in 0..k {
        a.step().unwrap();
    }
    let bytes = a.checkpoint().unwrap().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let ckpt_bitwise = ck.to_bytes().unwrap() == bytes;
    let mut b = Stage1::resume(cfg.clone(), &ck).unwrap();
    let drift1 = (a.step().unwrap() - b.step().unwrap()).abs();

    // stage 2
    let enc = a.checkpoint().unwrap();
    let mut a = Stage2::new(cfg.clone(), &enc).unwrap();
    for _ in 0..k {
        a.step().unwrap();
    }
    let bytes = a.checkpoint().unwrap().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let ckpt_bitwise = ckpt_bitwise && ck.to_bytes().unwrap() == bytes;
    let mut b = Stage2::resume(cfg, &enc, &ck).unwrap();
    let drift2 = (a.step().unwrap() - b.step().unwrap()).abs();

    Verdict {
        id: 10,
        title: "file formats and resume",
        passed: vemv && ckpt_bitwise && drift1 < 1e-6 && drift2 < 1e-6,
        detail: format!(
            "VEMV bitwise {vemv}, checkpoint bitwise {ckpt_bitwise}, next-step drift stage 1 {drift1:.2e}, stage 2 {drift2:.2e} (< 1e-6)"
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let mut verdicts = vec![c1_scan_integrity(), c2_ssm_duality(), c3_parallel_scan(), c4_gradients(), c5_metrics()];
    let cfg = smoke_config(dir.path());
    let (c6, encoder) = c6_moco(&cfg);
    verdicts.push(c6);
    let (c7, c9) = c7_c9_reconstruction(&cfg, &encoder);
    verdicts.push(c7);
    verdicts.push(c8_params());
    verdicts.push(c9);
    verdicts.push(c10_formats_and_resume(dir.path()));
    verdicts.sort_by_key(|v| v.id);
    for v in &verdicts {
        println!(
            "[{}] criterion {:>2} {}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.id,
            v.title,
            v.detail
        );
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
