//! Invariant suite: named gradient checks for every differentiable op and the
//! self-test registry shared by the CLI, the Python bindings and the tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::{model_checkpoint, Checkpoint};
use crate::diffcore::ops::{
    conv3d, conv3d_backward, depthwise_conv3d, depthwise_conv3d_backward, layer_norm_channels,
    layer_norm_channels_backward, pointwise, pointwise_backward,
};
use crate::diffcore::{gradcheck_sampled, DiffOp, FnOp, GradcheckReport, NdArray, ParamOp, ParamStore};
use crate::error::{Error, Result};
use crate::losses::{psnr, ssim, ssim_loss, ssim_with_grad, total_loss, total_loss_with_grad, SsimConfig};
use crate::moco::{info_nce, info_nce_with_grad, is_buffer, Encoder, EncoderConfig};
use crate::network::{pixel_shuffle_h, pixel_unshuffle_h, random_embedding, ConvFfn, Model, ModelConfig, Rvmb, Vdim};
use crate::scanpath::{build_path, chunk_channels, flatten, restore, verify_path, PathSet, ScanAssignment};
use crate::ssm::{
    conv_apply, lti_kernel, lti_scan, scan_core, scan_core_backward, selective_scan,
    selective_scan_backward, selective_scan_parallel, ScanInputs, SsmParams,
};
use crate::vemm::{dwam, dwam_backward, DwamParams, Vemm, VemmConfig};
use crate::volume::{from_bytes, generate_phantom, to_bytes};

fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray {
    NdArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / s).collect()
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) -> Result<()> {
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for n in names {
        let shape = store.value(&n)?.shape().to_vec();
        store.set_value(&n, rand_arr(&shape, rng).scale(scale))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradient checks

/// A finite-difference problem: an op, the point to check it at, the step
/// and how many coordinates per input to probe.
pub struct GradProblem {
    pub op: Box<dyn DiffOp>,
    pub point: Vec<NdArray>,
    pub eps: f64,
    pub max_per_input: usize,
}

/// A named gradient check with its relative-error tolerance.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    build: fn(u64) -> Result<GradProblem>,
}

impl GradCase {
    pub fn problem(&self, seed: u64) -> Result<GradProblem> {
        (self.build)(seed)
    }

    pub fn run(&self, seed: u64) -> Result<GradcheckReport> {
        let p = self.problem(seed)?;
        gradcheck_sampled(p.op.as_ref(), &p.point, p.eps, p.max_per_input)
    }
}

fn full(op: impl DiffOp + 'static, point: Vec<NdArray>) -> GradProblem {
    GradProblem {
        op: Box::new(op),
        point,
        eps: 1e-5,
        max_per_input: usize::MAX,
    }
}

fn triple_op(
    fwd: fn(&NdArray, &NdArray, &NdArray) -> Result<NdArray>,
    bwd: fn(&NdArray, &NdArray, &NdArray, &mut NdArray, &mut NdArray) -> Result<NdArray>,
) -> impl DiffOp {
    FnOp::new(
        move |i: &[NdArray]| fwd(&i[0], &i[1], &i[2]),
        move |i: &[NdArray], dy: &NdArray| {
            let mut dw = NdArray::zeros(i[1].shape());
            let mut db = NdArray::zeros(i[2].shape());
            let dx = bwd(&i[0], &i[1], dy, &mut dw, &mut db)?;
            Ok(vec![dx, dw, db])
        },
    )
}

fn gc_conv3d(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = vec![
        rand_arr(&[2, 2, 3, 4], &mut rng),
        rand_arr(&[3, 2, 3, 3, 3], &mut rng),
        rand_arr(&[3], &mut rng),
    ];
    Ok(full(triple_op(conv3d, conv3d_backward), point))
}

fn gc_depthwise(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = vec![
        rand_arr(&[3, 2, 2, 3], &mut rng),
        rand_arr(&[2, 3, 3, 3], &mut rng),
        rand_arr(&[2], &mut rng),
    ];
    Ok(full(triple_op(depthwise_conv3d, depthwise_conv3d_backward), point))
}

fn gc_pointwise(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = vec![
        rand_arr(&[2, 3, 2, 2], &mut rng),
        rand_arr(&[4, 3], &mut rng),
        rand_arr(&[4], &mut rng),
    ];
    Ok(full(triple_op(pointwise, pointwise_backward), point))
}

fn gc_layer_norm(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = FnOp::new(
        |i: &[NdArray]| Ok(layer_norm_channels(&i[0])?.0),
        |i: &[NdArray], dy: &NdArray| {
            let (xh, is) = layer_norm_channels(&i[0])?;
            Ok(vec![layer_norm_channels_backward(&xh, &is, dy)?])
        },
    );
    Ok(full(op, vec![rand_arr(&[2, 4, 2, 3], &mut rng)]))
}

fn gc_pixel_shuffle(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = FnOp::new(
        |i: &[NdArray]| pixel_shuffle_h(&i[0], 2),
        |_: &[NdArray], dy: &NdArray| Ok(vec![pixel_unshuffle_h(dy, 2)?]),
    );
    Ok(full(op, vec![rand_arr(&[2, 4, 2, 3], &mut rng)]))
}

fn gc_scan_flatten(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = ScanAssignment::ALL_FOUR[(seed % 4) as usize];
    let path = build_path([2, 3, 2], dir.order, dir.reversed)?;
    let p2 = path.clone();
    let op = FnOp::new(
        move |i: &[NdArray]| flatten(&i[0], &path),
        move |_: &[NdArray], dy: &NdArray| Ok(vec![restore(dy, &p2)?]),
    );
    Ok(full(op, vec![rand_arr(&[2, 2, 3, 2], &mut rng)]))
}

fn gc_scan_core(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d, n) = (5, 2, 3);
    let point = vec![
        rand_arr(&[l, d], &mut rng),
        NdArray::from_fn(&[l, d], |_| rng.random_range(0.05..1.0)),
        NdArray::from_fn(&[d, n], |_| -rng.random_range(0.2..2.0)),
        rand_arr(&[l, n], &mut rng),
        rand_arr(&[l, n], &mut rng),
    ];
    let op = FnOp::new(
        |i: &[NdArray]| {
            Ok(scan_core(ScanInputs {
                x: &i[0],
                delta: &i[1],
                a: &i[2],
                b: &i[3],
                c: &i[4],
            })?
            .0)
        },
        |i: &[NdArray], dy: &NdArray| {
            let inp = ScanInputs {
                x: &i[0],
                delta: &i[1],
                a: &i[2],
                b: &i[3],
                c: &i[4],
            };
            let (_, saved) = scan_core(inp)?;
            let g = scan_core_backward(inp, &saved, dy)?;
            Ok(vec![g.dx, g.ddelta, g.da, g.db, g.dc])
        },
    );
    Ok(full(op, point))
}

fn gc_selective_scan(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = (2, 3);
    let mut p = SsmParams::init(d, n, &mut rng);
    // larger Δ so every path through the dynamics carries signal
    p.delta_bias = NdArray::from_fn(&[d], |_| rng.random_range(-1.0..0.5));
    let unpack = |i: &[NdArray]| SsmParams {
        log_a: i[1].clone(),
        w_delta: i[2].clone(),
        delta_bias: i[3].clone(),
        w_b: i[4].clone(),
        w_c: i[5].clone(),
    };
    let op = FnOp::new(
        move |i: &[NdArray]| Ok(selective_scan(&i[0], &unpack(i))?.0),
        move |i: &[NdArray], dy: &NdArray| {
            let p = unpack(i);
            let (_, saved) = selective_scan(&i[0], &p)?;
            let (dx, g) = selective_scan_backward(&i[0], &p, &saved, dy)?;
            let mut out = vec![dx];
            out.extend(g.0.arrays().into_iter().cloned());
            Ok(out)
        },
    );
    let mut point = vec![rand_arr(&[6, d], &mut rng)];
    point.extend(p.arrays().into_iter().cloned());
    Ok(full(op, point))
}

fn gc_dwam(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point: Vec<NdArray> = (0..4).map(|_| rand_arr(&[2, 2, 2, 2], &mut rng)).collect();
    point.extend([
        rand_arr(&[4, 5], &mut rng),
        rand_arr(&[5], &mut rng),
        rand_arr(&[5, 4], &mut rng),
        rand_arr(&[4], &mut rng),
    ]);
    let unpack = |i: &[NdArray]| DwamParams {
        w1: i[4].clone(),
        b1: i[5].clone(),
        w2: i[6].clone(),
        b2: i[7].clone(),
    };
    let op = FnOp::new(
        move |i: &[NdArray]| dwam([&i[0], &i[1], &i[2], &i[3]], &unpack(i)),
        move |i: &[NdArray], dy: &NdArray| {
            let (dins, g) = dwam_backward([&i[0], &i[1], &i[2], &i[3]], &unpack(i), dy)?;
            let mut out: Vec<NdArray> = dins.into();
            out.extend([g.w1, g.b1, g.w2, g.b2]);
            Ok(out)
        },
    );
    Ok(full(op, point))
}

fn gc_vemm(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let block = Vemm::new("v", VemmConfig::new(c, 3, 4))?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng)?;
    // push the fusion perceptron away from its near-uniform init
    for chunk in 0..2 {
        let p = block.dwam_prefix(chunk);
        for n in ["w1", "b1", "w2", "b2"] {
            let name = format!("{p}.{n}");
            let shape = store.value(&name)?.shape().to_vec();
            store.set_value(&name, rand_arr(&shape, &mut rng))?;
        }
        // O(1) step sizes make the directional outputs differ; at init they
        // are ~1% of the input and the fusion gradients fall below 1e-8
        for slot in 0..4 {
            let name = format!("{}.delta_bias", block.ssm_prefix(chunk, slot));
            let shape = store.value(&name)?.shape().to_vec();
            store.set_value(&name, rand_arr(&shape, &mut rng).map(|v| v.abs()))?;
        }
    }
    store.set_value("v.out.b", rand_arr(&[c], &mut rng))?;
    let paths = PathSet::new([2, 2, 3])?;
    let x = rand_arr(&[2, c, 2, 3], &mut rng);
    let (b1, p1) = (block.clone(), paths.clone());
    let op = ParamOp::new(
        store,
        1,
        move |s: &ParamStore, d: &[NdArray]| Ok(b1.forward(s, &p1, &d[0])?.0),
        move |s: &mut ParamStore, d: &[NdArray], dy: &NdArray| {
            let (_, cache) = block.forward(s, &paths, &d[0])?;
            Ok(vec![block.backward(s, &paths, &cache, dy)?])
        },
    );
    let point = op.point(&[x]);
    // balances truncation (large steps) against roundoff on the smallest
    // gradient entries (tiny steps)
    Ok(GradProblem {
        op: Box::new(op),
        point,
        eps: 2e-4,
        max_per_input: 24,
    })
}

fn gc_vdim(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Vdim::new("m", 4, 3);
    let mut store = ParamStore::new();
    v.init(&mut store)?;
    randomize(&mut store, &mut rng, 1.0)?;
    let f = rand_arr(&[2, 4, 2, 2], &mut rng);
    let d = NdArray::new(&[3], random_embedding(3, &mut rng))?;
    let (v1, v2) = (v.clone(), v);
    let op = ParamOp::new(
        store,
        2,
        move |s: &ParamStore, i: &[NdArray]| Ok(v1.forward(s, &i[0], i[1].data())?.0),
        move |s: &mut ParamStore, i: &[NdArray], dy: &NdArray| {
            let (_, c) = v2.forward(s, &i[0], i[1].data())?;
            let (df, dd) = v2.backward(s, &c, i[1].data(), dy)?;
            Ok(vec![df, NdArray::new(&[3], dd)?])
        },
    );
    let point = op.point(&[f, d]);
    Ok(full(op, point))
}

fn gc_convffn(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ffn = ConvFfn::new("c", 2);
    let mut store = ParamStore::new();
    ffn.init(&mut store, &mut rng)?;
    randomize(&mut store, &mut rng, 0.7)?;
    let x = rand_arr(&[2, 2, 3, 3], &mut rng);
    let (f1, f2) = (ffn.clone(), ffn);
    let op = ParamOp::new(
        store,
        1,
        move |s: &ParamStore, i: &[NdArray]| Ok(f1.forward(s, &i[0])?.0),
        move |s: &mut ParamStore, i: &[NdArray], dy: &NdArray| {
            let (_, c) = f2.forward(s, &i[0])?;
            Ok(vec![f2.backward(s, &c, dy)?])
        },
    );
    let point = op.point(&[x]);
    Ok(full(op, point))
}

fn tiny_model_cfg(embed: usize) -> ModelConfig {
    ModelConfig {
        channels: 4,
        groups: 1,
        blocks: 1,
        scale: 2,
        states: 2,
        embed_dim: embed,
        dwam_hidden: 3,
    }
}

fn gc_rvmb(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = Rvmb::new("b", &tiny_model_cfg(2))?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng)?;
    randomize(&mut store, &mut rng, 0.6)?;
    let paths = PathSet::new([2, 2, 2])?;
    let f = rand_arr(&[2, 4, 2, 2], &mut rng);
    let d = NdArray::new(&[2], random_embedding(2, &mut rng))?;
    let (b1, p1, b2, p2) = (block.clone(), paths.clone(), block, paths);
    let op = ParamOp::new(
        store,
        2,
        move |s: &ParamStore, i: &[NdArray]| Ok(b1.forward(s, &p1, &i[0], i[1].data())?.0),
        move |s: &mut ParamStore, i: &[NdArray], dy: &NdArray| {
            let (_, c) = b2.forward(s, &p2, &i[0], i[1].data())?;
            let mut dd = vec![0.0; 2];
            let df = b2.backward(s, &p2, &c, i[1].data(), dy, &mut dd)?;
            Ok(vec![df, NdArray::new(&[2], dd)?])
        },
    );
    let point = op.point(&[f, d]);
    Ok(GradProblem {
        op: Box::new(op),
        point,
        eps: 2e-4,
        max_per_input: 12,
    })
}

fn gc_model(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(tiny_model_cfg(3))?;
    let mut store = model.init(&mut rng)?;
    randomize(&mut store, &mut rng, 0.5)?;
    let x = NdArray::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.0..1.0));
    let d = NdArray::new(&[3], random_embedding(3, &mut rng))?;
    let (m1, m2) = (model.clone(), model);
    let op = ParamOp::new(
        store,
        2,
        move |s: &ParamStore, i: &[NdArray]| m1.forward(s, &i[0], i[1].data()),
        move |s: &mut ParamStore, i: &[NdArray], dy: &NdArray| {
            let (_, c) = m2.forward_cached(s, &i[0], i[1].data())?;
            let (dx, dd) = m2.backward(s, &c, i[1].data(), dy)?;
            Ok(vec![dx, NdArray::new(&[3], dd)?])
        },
    );
    let point = op.point(&[x, d]);
    Ok(GradProblem {
        op: Box::new(op),
        point,
        eps: 1e-3,
        max_per_input: 8,
    })
}

fn gc_encoder(seed: u64, train: bool) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        channels: 4,
        blocks: 2,
        embed_dim: 3,
    };
    let enc = Encoder::new("e", cfg)?;
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut rng)?;
    for i in 0..2 {
        store.set_value(
            &format!("e.blocks.{i}.bn.running_mean"),
            NdArray::from_fn(&[4], |_| rng.random_range(-0.1..0.1)),
        )?;
        store.set_value(
            &format!("e.blocks.{i}.bn.running_var"),
            NdArray::from_fn(&[4], |_| rng.random_range(0.5..2.0)),
        )?;
    }
    let xs: Vec<NdArray> = (0..2)
        .map(|_| NdArray::from_fn(&[4, 1, 8, 8], |_| rng.random_range(0.0..1.0)))
        .collect();
    // running statistics are constants of the function, not inputs; in
    // training mode the batch norm also cancels the conv bias before it, so
    // that gradient is identically zero and only measures roundoff
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    for (n, p) in store.iter() {
        let constant = is_buffer(n) || (train && n.ends_with(".conv.b"));
        let target = if constant { &mut buffers } else { &mut params };
        target.insert(n, p.value.clone())?;
    }
    let merged = move |s: &ParamStore| -> Result<ParamStore> {
        let mut m = buffers.clone();
        for (n, p) in s.iter() {
            m.insert(n, p.value.clone())?;
        }
        Ok(m)
    };
    let merged2 = merged.clone();
    // random unit projections of the two embeddings make a scalar objective
    let proj = [unit(3, &mut rng), unit(3, &mut rng)];
    let (e1, e2, p1) = (enc.clone(), enc, proj.clone());
    let op = ParamOp::new(
        params,
        2,
        move |s: &ParamStore, i: &[NdArray]| {
            let (e, _) = e1.forward(&merged(s)?, i, train)?;
            let v: f64 = (0..2)
                .map(|b| e[b].iter().zip(&p1[b]).map(|(x, y)| x * y).sum::<f64>())
                .sum();
            Ok(NdArray::scalar(v))
        },
        move |s: &mut ParamStore, i: &[NdArray], dy: &NdArray| {
            let mut m = merged2(s)?;
            let (_, c) = e2.forward(&m, i, train)?;
            let g = dy.data()[0];
            let de: Vec<Vec<f64>> = proj.iter().map(|p| p.iter().map(|v| v * g).collect()).collect();
            let dx = e2.backward(&mut m, &c, &de)?;
            let names: Vec<String> = s.names().map(str::to_owned).collect();
            for n in names {
                s.accumulate(&n, m.grad(&n)?)?;
            }
            Ok(dx)
        },
    );
    let point = op.point(&xs);
    Ok(GradProblem {
        op: Box::new(op),
        point,
        eps: 1e-5,
        max_per_input: 40,
    })
}

fn gc_encoder_train(seed: u64) -> Result<GradProblem> {
    gc_encoder(seed, true)
}

fn gc_encoder_eval(seed: u64) -> Result<GradProblem> {
    gc_encoder(seed, false)
}

fn gc_info_nce(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, l) = (4, 5);
    let q: Vec<Vec<f64>> = (0..n).map(|_| unit(l, &mut rng)).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|_| unit(l, &mut rng)).collect();
    let k2 = k.clone();
    let rows = move |a: &NdArray| a.data().chunks(l).map(|c| c.to_vec()).collect::<Vec<_>>();
    let op = FnOp::new(
        move |i: &[NdArray]| Ok(NdArray::scalar(info_nce(&rows(&i[0]), &k, 0.5)?)),
        move |i: &[NdArray], dy: &NdArray| {
            let (_, dq) = info_nce_with_grad(&rows(&i[0]), &k2, 0.5)?;
            let g = dy.data()[0];
            Ok(vec![NdArray::new(&[n, l], dq.concat().iter().map(|v| v * g).collect())?])
        },
    );
    Ok(full(op, vec![NdArray::new(&[n, l], q.concat())?]))
}

fn gc_ssim_loss(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SsimConfig::default();
    let y: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let yhat = NdArray::from_fn(&[64], |_| rng.random_range(0.0..1.0));
    let y2 = y.clone();
    let op = FnOp::new(
        move |i: &[NdArray]| Ok(NdArray::scalar(ssim_loss(&y, i[0].data(), [1, 8, 8], &cfg)?)),
        move |i: &[NdArray], dy: &NdArray| {
            let (_, g) = ssim_with_grad(&y2, i[0].data(), [1, 8, 8], &cfg)?;
            let s = dy.data()[0];
            Ok(vec![NdArray::new(&[64], g.iter().map(|v| -s * v).collect())?])
        },
    );
    Ok(full(op, vec![yhat]))
}

fn gc_total_loss(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SsimConfig::default();
    let y: Vec<f64> = (0..72).map(|_| rng.random_range(0.0..1.0)).collect();
    // keep every residual far from the kink of |·|
    let yhat = NdArray::from_fn(&[72], |i| {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        y[i] + sign * rng.random_range(0.05..0.3)
    });
    let y2 = y.clone();
    let op = FnOp::new(
        move |i: &[NdArray]| Ok(NdArray::scalar(total_loss(&y, i[0].data(), [2, 6, 6], &cfg)?)),
        move |i: &[NdArray], dy: &NdArray| {
            let (_, g) = total_loss_with_grad(&y2, i[0].data(), [2, 6, 6], &cfg)?;
            let s = dy.data()[0];
            Ok(vec![NdArray::new(&[72], g.iter().map(|v| s * v).collect())?])
        },
    );
    Ok(full(op, vec![yhat]))
}

/// Every differentiable op of the crate, plus the end-to-end micro model.
pub fn grad_cases() -> Vec<GradCase> {
    let c = |name, tolerance, build| GradCase {
        name,
        tolerance,
        build,
    };
    vec![
        c("conv3d", 1e-4, gc_conv3d as fn(u64) -> Result<GradProblem>),
        c("depthwise_conv3d", 1e-4, gc_depthwise),
        c("pointwise", 1e-4, gc_pointwise),
        c("layer_norm", 1e-4, gc_layer_norm),
        c("pixel_shuffle", 1e-4, gc_pixel_shuffle),
        c("scan_flatten", 1e-4, gc_scan_flatten),
        c("scan_core", 1e-4, gc_scan_core),
        c("selective_scan", 1e-4, gc_selective_scan),
        c("dwam", 1e-4, gc_dwam),
        c("vemm", 1e-4, gc_vemm),
        c("vdim", 1e-4, gc_vdim),
        c("convffn", 1e-4, gc_convffn),
        c("rvmb", 1e-4, gc_rvmb),
        c("info_nce", 1e-4, gc_info_nce),
        c("ssim_loss", 1e-3, gc_ssim_loss),
        c("total_loss", 1e-3, gc_total_loss),
        c("encoder_train", 1e-3, gc_encoder_train),
        c("encoder_eval", 1e-3, gc_encoder_eval),
        c("micro_model", 1e-3, gc_model),
    ]
}

// ---------------------------------------------------------------------------
// invariant probes

/// Exhaustively checks every scan path of every dims with `F·h·W ≤
/// max_voxels`: bijective, unit-step continuous, and `restore ∘ flatten` is
/// the identity. Returns the number of `(dims, branch)` pairs checked.
pub fn scan_integrity(max_voxels: usize, corrupt: bool) -> std::result::Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca9);
    let mut checked = 0;
    for f in 1..=max_voxels {
        for h in 1..=max_voxels / f {
            for w in 1..=max_voxels / (f * h) {
                let dims = [f, h, w];
                let mut set = PathSet::new(dims).map_err(|e| e.to_string())?;
                if corrupt {
                    set.corrupt_for_testing();
                }
                let x = rand_arr(&[f, 4, h, w], &mut rng);
                let pair = chunk_channels(&x).map_err(|e| e.to_string())?;
                for (chunk, directions) in [&pair.chunk1, &pair.chunk2].iter().zip(ScanAssignment::default().0) {
                    for dir in directions {
                        let path = set.get(dir);
                        verify_path(path).map_err(|e| format!("dims {dims:?} {dir:?}: {e}"))?;
                        let back = flatten(chunk, path)
                            .and_then(|s| restore(&s, path))
                            .map_err(|e| e.to_string())?;
                        if back != **chunk {
                            return Err(format!("dims {dims:?} {dir:?}: restore∘flatten differs"));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(checked)
}

/// Max |recurrence − convolution| over random stable LTI instances.
pub fn lti_duality_error(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=6);
        let len = rng.random_range(1..=24);
        let abar: Vec<f64> = (0..n).map(|_| rng.random_range(-0.95..0.95)).collect();
        let bbar: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys = lti_scan(&abar, &bbar, &c, &x, None)?;
        let yc = conv_apply(&x, &lti_kernel(&abar, &bbar, &c, len)?);
        for (a, b) in ys.iter().zip(&yc) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Max |parallel − sequential| selective scan over random instances and
/// block sizes `{1, 3, 8, L}`.
pub fn parallel_scan_error(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (d, n, l) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(2..=48));
        let p = SsmParams::init(d, n, &mut rng);
        let x = rand_arr(&[l, d], &mut rng);
        let (y, _) = selective_scan(&x, &p)?;
        for block in [1, 3, 8, l] {
            worst = worst.max(y.max_abs_diff(&selective_scan_parallel(&x, &p, block)?)?);
        }
    }
    Ok(worst)
}

/// Closed-form metric values, each as `(name, computed, expected, tolerance)`.
pub fn metric_closed_forms() -> Result<Vec<(&'static str, f64, f64, f64)>> {
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let x: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
    let self_ssim = ssim(&x, &x, [2, 16, 16], &cfg)?;
    let a = vec![0.3; 16 * 16];
    let b = vec![0.7; 16 * 16];
    let patch = ssim(&a, &b, [1, 16, 16], &cfg)?;
    let y: Vec<f64> = (0..1000).map(|i| 0.1 + (i % 7) as f64 * 0.1).collect();
    let yh: Vec<f64> = y.iter().map(|v| v + 1.0 / 255.0).collect();
    let p = psnr(&y, &yh, 1.0)?;
    let n = 6;
    let e = vec![unit(8, &mut rng); n];
    let nce = info_nce(&e, &e, 0.07)?;
    Ok(vec![
        ("ssim_identity", self_ssim, 1.0, 1e-12),
        ("ssim_constant_patch", patch, 0.7241, 1e-3),
        ("psnr_uniform_error", p, 48.13, 0.01),
        ("info_nce_identical", nce, n as f64 * (n as f64).ln(), 1e-9),
    ])
}

// ---------------------------------------------------------------------------
// self-test

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Test hook: corrupts the scan path tables before the scan checks.
    pub corrupt_path_table: bool,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn to_json(&self) -> serde_json::Value {
        json!({"name": self.name, "passed": self.passed, "detail": self.detail, "seconds": self.seconds})
    }
}

type Probe = Box<dyn Fn(&SelftestOptions) -> std::result::Result<String, String> + Send + Sync>;

/// A named invariant of the self-test suite.
pub struct SelfCheck {
    pub name: String,
    probe: Probe,
}

impl SelfCheck {
    fn new(
        name: impl Into<String>,
        probe: impl Fn(&SelftestOptions) -> std::result::Result<String, String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            probe: Box::new(probe),
        }
    }

    pub fn run(&self, opts: &SelftestOptions) -> CheckOutcome {
        let t0 = Instant::now();
        let (passed, detail) = match (self.probe)(opts) {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        CheckOutcome {
            name: self.name.clone(),
            passed,
            detail,
            seconds: t0.elapsed().as_secs_f64(),
        }
    }
}

fn bound(what: &str, value: f64, tol: f64) -> std::result::Result<String, String> {
    if value < tol {
        Ok(format!("{what} {value:.3e} < {tol:.0e}"))
    } else {
        Err(format!("{what} {value:.3e} >= {tol:.0e}"))
    }
}

fn err_str(e: Error) -> String {
    e.to_string()
}

/// The self-test registry, in execution order.
pub fn selftest_registry() -> Vec<SelfCheck> {
    let mut checks = vec![
        SelfCheck::new("scan.integrity", |o| {
            scan_integrity(64, o.corrupt_path_table).map(|n| format!("{n} (dims, branch) pairs"))
        }),
        SelfCheck::new("ssm.lti_duality", |_| {
            bound("max diff", lti_duality_error(50, 11).map_err(err_str)?, 1e-10)
        }),
        SelfCheck::new("ssm.parallel_scan", |_| {
            bound("max diff", parallel_scan_error(20, 13).map_err(err_str)?, 1e-9)
        }),
    ];
    for (i, (name, ..)) in metric_closed_forms()
        .expect("closed-form probes use valid inputs")
        .into_iter()
        .enumerate()
    {
        checks.push(SelfCheck::new(format!("metrics.{name}"), move |_| {
            let (_, got, want, tol) = metric_closed_forms().map_err(err_str)?[i];
            if (got - want).abs() <= tol {
                Ok(format!("{got:.6} ≈ {want} ± {tol:.0e}"))
            } else {
                Err(format!("{got:.6} vs {want} ± {tol:.0e}"))
            }
        }));
    }
    checks.push(SelfCheck::new("format.vemv_roundtrip", |_| {
        let v = generate_phantom([8, 16, 16], 7).map_err(err_str)?;
        let b = to_bytes(&v);
        let back = from_bytes(&b).map_err(err_str)?;
        if back == v && to_bytes(&back) == b {
            Ok(format!("{} bytes bitwise", b.len()))
        } else {
            Err("roundtrip differs".into())
        }
    }));
    checks.push(SelfCheck::new("format.checkpoint_roundtrip", |_| {
        let model = Model::new(ModelConfig::micro()).map_err(err_str)?;
        let params = model.init(&mut ChaCha8Rng::seed_from_u64(3)).map_err(err_str)?;
        let ck = model_checkpoint(&model, &params, None, json!({})).map_err(err_str)?;
        let b = ck.to_bytes().map_err(err_str)?;
        let b2 = Checkpoint::from_bytes(&b).and_then(|c| c.to_bytes()).map_err(err_str)?;
        if b == b2 {
            Ok(format!("{} bytes bitwise", b.len()))
        } else {
            Err("roundtrip differs".into())
        }
    }));
    checks.push(SelfCheck::new("model.param_count", |_| {
        let n = Model::param_count(&ModelConfig::default()).map_err(err_str)?;
        if n < 2_000_000 {
            Ok(format!("{n} parameters"))
        } else {
            Err(format!("{n} parameters exceed 2e6"))
        }
    }));
    for case in grad_cases() {
        checks.push(SelfCheck::new(format!("gradcheck.{}", case.name), move |_| {
            let r = case.run(0).map_err(err_str)?;
            bound("rel err", r.max_rel_err, case.tolerance)
        }));
    }
    checks
}

/// Runs every registered check.
pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckOutcome> {
    selftest_registry().iter().map(|c| c.run(opts)).collect()
}
