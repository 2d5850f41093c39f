use isoscan_core::diffcore::{gradcheck, gradcheck_sampled, FnOp, NdArray, ParamOp, ParamStore};
use isoscan_core::moco::{
    info_nce, info_nce_with_grad, is_buffer, moco_train_step, momentum_update, Encoder,
    EncoderConfig, MocoState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / s).collect()
}

fn micro() -> EncoderConfig {
    EncoderConfig {
        channels: 4,
        blocks: 2,
        embed_dim: 3,
    }
}

fn sub(rng: &mut ChaCha8Rng) -> NdArray {
    NdArray::from_fn(&[4, 1, 8, 8], |_| rng.random_range(0.0..1.0))
}

fn encoder_op(train: bool, seed: u64) -> (impl isoscan_core::diffcore::DiffOp, Vec<NdArray>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new("e", micro()).unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut rng).unwrap();
    // non-trivial running statistics for the eval-mode check
    for i in 0..2 {
        store
            .set_value(
                &format!("e.blocks.{i}.bn.running_mean"),
                NdArray::from_fn(&[4], |_| rng.random_range(-0.1..0.1)),
            )
            .unwrap();
        store
            .set_value(
                &format!("e.blocks.{i}.bn.running_var"),
                NdArray::from_fn(&[4], |_| rng.random_range(0.5..2.0)),
            )
            .unwrap();
    }
    let xs = vec![sub(&mut rng), sub(&mut rng)];
    // running statistics are constants of the function, not inputs
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    for (n, p) in store.iter() {
        let target = if is_buffer(n) { &mut buffers } else { &mut params };
        target.insert(n, p.value.clone()).unwrap();
    }
    let merged = move |s: &ParamStore| {
        let mut m = buffers.clone();
        for (n, p) in s.iter() {
            m.insert(n, p.value.clone()).unwrap();
        }
        m
    };
    let merged2 = merged.clone();
    // random unit projections of the two embeddings make a scalar objective
    let proj = [unit(3, &mut rng), unit(3, &mut rng)];
    let (e1, e2, p1) = (enc.clone(), enc, proj.clone());
    let op = ParamOp::new(
        params,
        2,
        move |s: &ParamStore, i: &[NdArray]| {
            let (e, _) = e1.forward(&merged(s), i, train)?;
            let v: f64 = (0..2)
                .map(|b| e[b].iter().zip(&p1[b]).map(|(x, y)| x * y).sum::<f64>())
                .sum();
            Ok(NdArray::scalar(v))
        },
        move |s: &mut ParamStore, i: &[NdArray], dy: &NdArray| {
            let mut m = merged2(s);
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
    (op, point)
}

#[test]
fn encoder_gradcheck_train_mode() {
    let (op, point) = encoder_op(true, 1);
    let r = gradcheck_sampled(&op, &point, 1e-5, 40).unwrap();
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

#[test]
fn encoder_gradcheck_eval_mode() {
    let (op, point) = encoder_op(false, 2);
    let r = gradcheck_sampled(&op, &point, 1e-5, 40).unwrap();
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

#[test]
fn info_nce_gradcheck_and_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4;
    let q: Vec<Vec<f64>> = (0..n).map(|_| unit(5, &mut rng)).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|_| unit(5, &mut rng)).collect();
    let kk = k.clone();
    let k2 = k.clone();
    let rows = |a: &NdArray| a.data().chunks(5).map(|c| c.to_vec()).collect::<Vec<_>>();
    let op = FnOp::new(
        move |i: &[NdArray]| Ok(NdArray::scalar(info_nce(&rows(&i[0]), &kk, 0.5)?)),
        move |i: &[NdArray], dy: &NdArray| {
            let (_, dq) = info_nce_with_grad(&rows(&i[0]), &k2, 0.5)?;
            let g = dy.data()[0];
            Ok(vec![NdArray::new(&[n, 5], dq.concat().iter().map(|v| v * g).collect())?])
        },
    );
    let point = [NdArray::new(&[n, 5], q.concat()).unwrap()];
    let r = gradcheck(&op, &point, 1e-5).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");

    let base = info_nce(&q, &k, 0.07).unwrap();
    let perm = [2, 0, 3, 1];
    let qp: Vec<_> = perm.iter().map(|&i| q[i].clone()).collect();
    let kp: Vec<_> = perm.iter().map(|&i| k[i].clone()).collect();
    assert!((info_nce(&qp, &kp, 0.07).unwrap() - base).abs() < 1e-12);
    assert!(base >= 0.0);
}

#[test]
fn key_encoder_moves_only_by_averaging() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut state = MocoState::new(micro(), 0.9, 0.07, &mut rng).unwrap();
    assert_eq!(state.query.checksum(), state.key.checksum());
    let qs: Vec<NdArray> = (0..3).map(|_| sub(&mut rng)).collect();
    let ks: Vec<NdArray> = (0..3).map(|_| sub(&mut rng)).collect();
    for _ in 0..3 {
        let key_before = state.key.clone();
        let loss = moco_train_step(&mut state, &qs, &ks, 1e-2).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(state.key.grads_are_zero());
        let mut expect = key_before;
        momentum_update(&state.query, &mut expect, 0.9).unwrap();
        for (name, p) in state.key.iter() {
            if !is_buffer(name) {
                assert_eq!(p.value, expect.value(name).unwrap().clone(), "{name}");
            }
        }
    }
}

#[test]
fn ema_converges_geometrically_to_frozen_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = MocoState::new(micro(), 0.8, 0.07, &mut rng).unwrap();
    let mut query = state.query.clone();
    let mut r2 = ChaCha8Rng::seed_from_u64(6);
    let enc = Encoder::new("enc", micro()).unwrap();
    let mut other = ParamStore::new();
    enc.init(&mut other, &mut r2).unwrap();
    query.copy_values_from(&other).unwrap();
    let mut key = state.key.clone();
    let gap = |k: &ParamStore| {
        k.iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(n, p)| p.value.max_abs_diff(query.value(n).unwrap()).unwrap())
            .fold(0.0, f64::max)
    };
    let g0 = gap(&key);
    for t in 1..=20 {
        momentum_update(&query, &mut key, 0.8).unwrap();
        let g = gap(&key);
        assert!((g - g0 * 0.8f64.powi(t)).abs() < 1e-12 * g0.max(1.0));
    }
}
