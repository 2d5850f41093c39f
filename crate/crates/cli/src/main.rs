//! `isoscan`: phantom generation, degradation, two-stage training, tiled
//! reconstruction, evaluation and the invariant suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. `ISOSCAN_THREADS`
//! caps the worker pool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use isoscan_core::checkpoint::Checkpoint;
use isoscan_core::checks::{grad_cases, run_selftest, SelftestOptions};
use isoscan_core::degradation::{degrade, DegradationProfile};
use isoscan_core::losses::Metrics;
use isoscan_core::reconstruct::{embed, Axis, Reconstructor, TileConfig};
use isoscan_core::train::{encoder_window, train_stage1, train_stage2, TrainConfig};
use isoscan_core::volume::{
    generate_phantom, import_raw_u8, load_volume, save_volume, transpose_axial_to_h, Volume,
};
use isoscan_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "isoscan", version, about = "Isotropic reconstruction of anisotropic volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.trim().parse::<T>().map_err(|_| format!("bad value `{p}`"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

fn dims_arg(s: &str) -> std::result::Result<[usize; 3], String> {
    let d = parse_triple::<usize>(s)?;
    if d.contains(&0) {
        return Err("dims must be positive".into());
    }
    Ok(d)
}

fn spacing_arg(s: &str) -> std::result::Result<[f32; 3], String> {
    parse_triple::<f32>(s)
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    H,
    Z,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a seeded synthetic phantom.
    Phantom {
        #[arg(long, value_parser = dims_arg, default_value = "16,64,64")]
        dims: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Blurs and subsamples a volume along h, then adds seeded noise.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Degradation profile JSON; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        filter_size: Option<usize>,
        #[arg(long)]
        blur_sigma: Option<f64>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Converts a raw 8-bit volume (values scaled by 1/255) to VEMV.
    ImportRaw {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = dims_arg)]
        dims: [usize; 3],
        #[arg(long, value_parser = spacing_arg, default_value = "1,1,1")]
        spacing: [f32; 3],
        #[arg(long)]
        output: PathBuf,
    },
    /// Stage 1: contrastive pre-training of the degradation encoder.
    TrainMoco {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: reconstruction training with the frozen encoder.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Tiled isotropic reconstruction along h or the section axis.
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long, value_enum, default_value = "h")]
        axis: AxisArg,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_parser = dims_arg, default_value = "16,32,64")]
        tile: [usize; 3],
        #[arg(long, default_value_t = 8)]
        overlap: usize,
        #[arg(long, default_value_t = 8)]
        halo: usize,
    },
    /// PSNR, SSIM and L1 of a prediction against a target.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Central-difference gradient checks of the differentiable ops.
    Gradcheck {
        /// Restrict to these ops (repeatable).
        #[arg(long = "op")]
        ops: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Runs the invariant suite.
    Selftest {
        /// Test hook: corrupts the scan path tables first.
        #[arg(long, hide = true)]
        corrupt_path_table: bool,
    },
}

fn read_volume(p: &Path) -> Result<Volume> {
    load_volume(std::io::BufReader::new(std::fs::File::open(p).map_err(|e| io_ctx(e, p))?))
}

fn write_volume(v: &Volume, p: &Path) -> Result<()> {
    save_volume(v, std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| io_ctx(e, p))?))
}

fn io_ctx(e: std::io::Error, p: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
}

fn load_config(config: Option<&Path>, output_dir: Option<PathBuf>) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p).map_err(|e| io_ctx(e, p))?)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("values serialize"));
}

/// Runs a command; `Ok(false)` means the command ran but reported failure.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Phantom { dims, seed, output } => {
            let v = generate_phantom(dims, seed)?;
            write_volume(&v, &output)?;
            print_json(&json!({"dims": v.dims(), "seed": seed, "mean": v.mean(), "output": output}));
        }
        Command::Degrade {
            input,
            output,
            config,
            filter_size,
            blur_sigma,
            noise_sigma,
            scale,
            seed,
        } => {
            let mut p: DegradationProfile = match &config {
                Some(c) => serde_json::from_str(&std::fs::read_to_string(c).map_err(|e| io_ctx(e, c))?)?,
                None => DegradationProfile::default(),
            };
            p.filter_size = filter_size.unwrap_or(p.filter_size);
            p.blur_sigma = blur_sigma.unwrap_or(p.blur_sigma);
            p.noise_sigma = noise_sigma.unwrap_or(p.noise_sigma);
            p.scale = scale.unwrap_or(p.scale);
            p.seed = seed.unwrap_or(p.seed);
            let x = read_volume(&input)?;
            let y = degrade(&x, &p)?;
            write_volume(&y, &output)?;
            print_json(&json!({"dims_in": x.dims(), "dims_out": y.dims(), "profile": p}));
        }
        Command::ImportRaw {
            input,
            dims,
            spacing,
            output,
        } => {
            let bytes = std::fs::read(&input).map_err(|e| io_ctx(e, &input))?;
            let v = import_raw_u8(&bytes, dims, spacing)?;
            write_volume(&v, &output)?;
            print_json(&json!({"dims": v.dims(), "spacing": v.spacing(), "mean": v.mean()}));
        }
        Command::TrainMoco {
            config,
            output_dir,
            resume,
        } => {
            let cfg = load_config(config.as_deref(), output_dir)?;
            let t0 = Instant::now();
            let r = train_stage1(&cfg, resume.as_deref())?;
            print_json(&json!({
                "steps": r.losses.len(),
                "initial_loss": r.losses.first(),
                "final_loss": r.losses.last(),
                "checkpoint": r.checkpoint,
                "curve": r.curve,
                "seconds": t0.elapsed().as_secs_f64(),
            }));
        }
        Command::Train {
            config,
            encoder,
            output_dir,
            resume,
        } => {
            let cfg = load_config(config.as_deref(), output_dir)?;
            let t0 = Instant::now();
            let r = train_stage2(&cfg, &encoder, resume.as_deref())?;
            print_json(&json!({
                "steps": r.losses.len(),
                "final_loss": r.losses.last(),
                "val": {"psnr": r.final_val.0, "ssim": r.final_val.1},
                "baseline_nearest": {"psnr": r.baseline.0, "ssim": r.baseline.1},
                "encoder_checksum_unchanged": r.encoder_checksum_before == r.encoder_checksum_after,
                "checkpoint": r.checkpoint,
                "curve": r.curve,
                "seconds": t0.elapsed().as_secs_f64(),
            }));
        }
        Command::Reconstruct {
            input,
            checkpoint,
            encoder,
            scale,
            axis,
            output,
            tile,
            overlap,
            halo,
        } => {
            let t0 = Instant::now();
            let (model, params) = Checkpoint::load(&checkpoint)?.into_model()?;
            if model.cfg.scale != scale {
                return Err(Error::Checkpoint(format!(
                    "checkpoint scale {} does not match --scale {scale}",
                    model.cfg.scale
                )));
            }
            let enc_ckpt = Checkpoint::load(&encoder)?;
            let (enc, enc_params) = enc_ckpt.into_encoder()?;
            if enc.cfg.embed_dim != model.cfg.embed_dim {
                return Err(Error::Checkpoint(format!(
                    "encoder embeds to {}, model expects {}",
                    enc.cfg.embed_dim, model.cfg.embed_dim
                )));
            }
            let x = read_volume(&input)?;
            let axis = match axis {
                AxisArg::H => Axis::H,
                AxisArg::Z => Axis::Z,
            };
            // the encoder sees the degraded axis in the h slot
            let seen = match axis {
                Axis::H => x.clone(),
                Axis::Z => transpose_axial_to_h(&x),
            };
            let d = embed(&enc, &enc_params, &seen, encoder_window(&enc_ckpt))?;
            let r = Reconstructor {
                model: &model,
                params: &params,
                tiles: TileConfig { tile, overlap, halo },
            };
            let y = r.reconstruct(&x, &d, axis)?;
            write_volume(&y, &output)?;
            print_json(&json!({
                "dims_in": x.dims(),
                "dims_out": y.dims(),
                "seconds": t0.elapsed().as_secs_f64(),
            }));
        }
        Command::Evaluate { pred, target } => {
            let p = read_volume(&pred)?;
            let t = read_volume(&target)?;
            if p.dims() != t.dims() {
                return Err(Error::Shape(format!(
                    "prediction dims {:?} differ from target dims {:?}",
                    p.dims(),
                    t.dims()
                )));
            }
            print_json(&Metrics::compute(&t.to_f64(), &p.to_f64(), t.dims())?.to_json());
        }
        Command::Gradcheck { ops, seeds } => {
            let cases: Vec<_> = grad_cases()
                .into_iter()
                .filter(|c| ops.is_empty() || ops.iter().any(|o| o == c.name))
                .collect();
            if let Some(o) = ops.iter().find(|o| !cases.iter().any(|c| c.name == o.as_str())) {
                let names: Vec<_> = grad_cases().iter().map(|c| c.name).collect();
                return Err(Error::InvalidArgument(format!(
                    "unknown op `{o}`; known: {}",
                    names.join(", ")
                )));
            }
            let mut all = true;
            let mut rows = Vec::new();
            for c in &cases {
                let mut worst: f64 = 0.0;
                for s in 0..seeds.max(1) {
                    worst = worst.max(c.run(s)?.max_rel_err);
                }
                let ok = worst < c.tolerance;
                all &= ok;
                println!(
                    "[{}] {:<18} max rel err {worst:.3e} (tol {:.0e})",
                    if ok { "PASS" } else { "FAIL" },
                    c.name,
                    c.tolerance
                );
                rows.push(json!({"op": c.name, "max_rel_err": worst, "tolerance": c.tolerance, "passed": ok}));
            }
            print_json(&json!({"passed": all, "checks": rows}));
            return Ok(all);
        }
        Command::Selftest { corrupt_path_table } => {
            let out = run_selftest(&SelftestOptions { corrupt_path_table });
            for o in &out {
                println!(
                    "[{}] {:<34} {} ({:.2}s)",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.detail,
                    o.seconds
                );
            }
            let passed = out.iter().filter(|o| o.passed).count();
            println!("{passed}/{} checks passed", out.len());
            return Ok(passed == out.len());
        }
    }
    Ok(true)
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("ISOSCAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("ISOSCAN_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
