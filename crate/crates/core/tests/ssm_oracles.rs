use isoscan_core::diffcore::{gradcheck, FnOp, NdArray};
use isoscan_core::ssm::{
    conv_apply, discretize_zoh, lti_kernel, lti_scan, scan_core, scan_core_backward,
    selective_scan, selective_scan_backward, selective_scan_parallel, ScanElem, ScanInputs,
    SsmParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray {
    NdArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn recurrence_equals_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(1..6);
        let abar: Vec<f64> = (0..n).map(|_| rng.random_range(-0.95..0.95)).collect();
        let bbar: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys = lti_scan(&abar, &bbar, &c, &x, None).unwrap();
        let yc = conv_apply(&x, &lti_kernel(&abar, &bbar, &c, x.len()).unwrap());
        let diff = ys
            .iter()
            .zip(&yc)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "duality diff {diff}");
    }
}

#[test]
fn constant_input_freezes_to_lti() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (d, n, l) = (3, 4, 12);
    let p = SsmParams::init(d, n, &mut rng);
    let xbar: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = NdArray::from_fn(&[l, d], |i| xbar[i % d]);
    let (y, saved) = selective_scan(&x, &p).unwrap();
    let a = p.state_matrix();
    for ch in 0..d {
        let delta = saved.delta.data()[ch];
        let b = &saved.b.data()[..n];
        let c = &saved.c.data()[..n];
        let (abar, bbar): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|s| discretize_zoh(a.data()[ch * n + s], b[s], delta).unwrap())
            .unzip();
        let xs = vec![xbar[ch]; l];
        let expect = lti_scan(&abar, &bbar, c, &xs, None).unwrap();
        for t in 0..l {
            assert!((y.data()[t * d + ch] - expect[t]).abs() < 1e-10);
        }
    }
}

#[test]
fn parallel_matches_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = SsmParams::init(4, 8, &mut rng);
    let x = rand_arr(&[64, 4], &mut rng);
    let (y, _) = selective_scan(&x, &p).unwrap();
    for block in [1, 3, 8, 64, 100] {
        let yp = selective_scan_parallel(&x, &p, block).unwrap();
        let diff = y.max_abs_diff(&yp).unwrap();
        assert!(diff < 1e-9, "block {block}: {diff}");
    }
    assert!(selective_scan_parallel(&x, &p, 0).is_err());
}

#[test]
fn scan_elements_associate() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let mut e = || ScanElem {
            a: rng.random_range(-1.0..1.0),
            b: rng.random_range(-3.0..3.0),
        };
        let (e1, e2, e3) = (e(), e(), e());
        let left = e3.after(e2).after(e1);
        let right = e3.after(e2.after(e1));
        assert!((left.a - right.a).abs() < 1e-12);
        assert!((left.b - right.b).abs() < 1e-12);
    }
}

fn selective_op() -> impl isoscan_core::diffcore::DiffOp {
    let unpack = |i: &[NdArray]| SsmParams {
        log_a: i[1].clone(),
        w_delta: i[2].clone(),
        delta_bias: i[3].clone(),
        w_b: i[4].clone(),
        w_c: i[5].clone(),
    };
    FnOp::new(
        move |i: &[NdArray]| Ok(selective_scan(&i[0], &unpack(i))?.0),
        move |i: &[NdArray], dy: &NdArray| {
            let p = unpack(i);
            let (_, saved) = selective_scan(&i[0], &p)?;
            let (dx, g) = selective_scan_backward(&i[0], &p, &saved, dy)?;
            let mut out = vec![dx];
            out.extend(g.0.arrays().into_iter().cloned());
            Ok(out)
        },
    )
}

#[test]
fn selective_scan_gradcheck() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (d, n) = (2, 3);
        let mut p = SsmParams::init(d, n, &mut rng);
        // larger Δ so every path through the dynamics carries signal
        p.delta_bias = NdArray::from_fn(&[d], |_| rng.random_range(-1.0..0.5));
        let x = rand_arr(&[6, d], &mut rng);
        let op = selective_op();
        let mut point = vec![x];
        point.extend(p.arrays().into_iter().cloned());
        let r = gradcheck(&op, &point, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn core_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (l, d, n) = (5, 2, 3);
    let x = rand_arr(&[l, d], &mut rng);
    let delta = NdArray::from_fn(&[l, d], |_| rng.random_range(0.05..1.0));
    let a = NdArray::from_fn(&[d, n], |_| -rng.random_range(0.2..2.0));
    let b = rand_arr(&[l, n], &mut rng);
    let c = rand_arr(&[l, n], &mut rng);
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
    let r = gradcheck(&op, &[x, delta, a, b, c], 1e-5).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn frozen_lti_gradient_matches_convolution_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (l, d, n) = (10, 2, 3);
    let x = rand_arr(&[l, d], &mut rng);
    let deltas: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..0.8)).collect();
    let delta = NdArray::from_fn(&[l, d], |i| deltas[i % d]);
    let a = NdArray::from_fn(&[d, n], |_| -rng.random_range(0.2..2.0));
    let bv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = NdArray::from_fn(&[l, n], |i| bv[i % n]);
    let c = NdArray::from_fn(&[l, n], |i| cv[i % n]);
    let dy = rand_arr(&[l, d], &mut rng);
    let inp = ScanInputs {
        x: &x,
        delta: &delta,
        a: &a,
        b: &b,
        c: &c,
    };
    let (_, saved) = scan_core(inp).unwrap();
    let g = scan_core_backward(inp, &saved, &dy).unwrap();
    for ch in 0..d {
        let (abar, bbar): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|s| discretize_zoh(a.data()[ch * n + s], bv[s], deltas[ch]).unwrap())
            .unzip();
        let k = lti_kernel(&abar, &bbar, &cv, l).unwrap();
        for s in 0..l {
            let expect: f64 = (s..l).map(|t| k[t - s] * dy.data()[t * d + ch]).sum();
            assert!((g.dx.data()[s * d + ch] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn bounded_input_bounded_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..10 {
        let (d, n, l) = (3, 4, 40);
        let mut p = SsmParams::init(d, n, &mut rng);
        p.w_delta = rand_arr(&[d, d], &mut rng);
        let x = rand_arr(&[l, d], &mut rng);
        let (_, saved) = selective_scan(&x, &p).unwrap();
        let (mut max_abar, mut max_bx, mut max_h) = (0.0f64, 0.0f64, 0.0f64);
        for t in 0..l {
            for ch in 0..d {
                for s in 0..n {
                    let (abar, bbar) = discretize_zoh(
                        saved.a.data()[ch * n + s],
                        saved.b.data()[t * n + s],
                        saved.delta.data()[t * d + ch],
                    )
                    .unwrap();
                    assert!(abar.abs() < 1.0);
                    max_abar = max_abar.max(abar.abs());
                    max_bx = max_bx.max((bbar * x.data()[t * d + ch]).abs());
                    max_h = max_h.max(saved.core.h[(t * d + ch) * n + s].abs());
                }
            }
        }
        assert!(max_h <= max_bx / (1.0 - max_abar) + 1e-12);
    }
}
