use isoscan_core::diffcore::{gradcheck, gradcheck_sampled, FnOp, NdArray, ParamOp, ParamStore};
use isoscan_core::scanpath::PathSet;
use isoscan_core::vemm::{dwam, dwam_backward, DwamParams, Vemm, VemmConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray {
    NdArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn block_with_store(c: usize, seed: u64) -> (Vemm, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = Vemm::new("v", VemmConfig::new(c, 3, 4)).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng).unwrap();
    // push the fusion perceptron away from its near-uniform init
    for chunk in 0..2 {
        let p = block.dwam_prefix(chunk);
        for n in ["w1", "b1", "w2", "b2"] {
            let name = format!("{p}.{n}");
            let shape = store.value(&name).unwrap().shape().to_vec();
            store.set_value(&name, rand_arr(&shape, &mut rng)).unwrap();
        }
    }
    let ob = rand_arr(&[c], &mut rng);
    store.set_value("v.out.b", ob).unwrap();
    (block, store)
}

#[test]
fn dwam_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let shape = [2, 2, 2, 2];
    let ins: Vec<NdArray> = (0..4).map(|_| rand_arr(&shape, &mut rng)).collect();
    let p = DwamParams {
        w1: rand_arr(&[4, 5], &mut rng),
        b1: rand_arr(&[5], &mut rng),
        w2: rand_arr(&[5, 4], &mut rng),
        b2: rand_arr(&[4], &mut rng),
    };
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
    let mut point = ins;
    point.extend([p.w1, p.b1, p.w2, p.b2]);
    let r = gradcheck(&op, &point, 1e-5).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn block_gradcheck() {
    let (block, store) = block_with_store(4, 32);
    let dims = [2, 2, 3];
    let paths = PathSet::new(dims).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = rand_arr(&[2, 4, 2, 3], &mut rng);
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
    // small gradient entries make the relative error roundoff-bound at
    // tiny steps; the largest admissible step keeps truncation at ~1e-5
    let r = gradcheck_sampled(&op, &point, 1e-3, 24).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

fn rotate(x: &NdArray) -> NdArray {
    let s = x.shape().to_vec();
    let (nf, c, nh, nw) = (s[0], s[1], s[2], s[3]);
    NdArray::from_fn(&s, |i| {
        let xx = i % nw;
        let y = (i / nw) % nh;
        let ch = (i / (nw * nh)) % c;
        let f = i / (nw * nh * c);
        x.data()[((nf - 1 - f) * c + ch) * nh * nw + (nh - 1 - y) * nw + (nw - 1 - xx)]
    })
}

#[test]
fn half_turn_swaps_forward_and_reverse_roles() {
    let (block, store) = block_with_store(4, 34);
    let paths = PathSet::new([3, 3, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let x = rand_arr(&[3, 4, 3, 3], &mut rng);
    let (y, _) = block.forward(&store, &paths, &x).unwrap();

    // swap the parameters of forward/reverse slots and permute the fusion
    // perceptron to match the new slot order
    let mut swapped = store.clone();
    for chunk in 0..2 {
        for (a, b) in [(0, 1), (2, 3)] {
            let (pa, pb) = (block.ssm_prefix(chunk, a), block.ssm_prefix(chunk, b));
            for n in ["log_a", "w_delta", "delta_bias", "w_b", "w_c"] {
                let va = store.value(&format!("{pa}.{n}")).unwrap().clone();
                let vb = store.value(&format!("{pb}.{n}")).unwrap().clone();
                swapped.set_value(&format!("{pa}.{n}"), vb).unwrap();
                swapped.set_value(&format!("{pb}.{n}"), va).unwrap();
            }
        }
        let perm = [1, 0, 3, 2];
        let p = block.dwam_prefix(chunk);
        let w1 = store.value(&format!("{p}.w1")).unwrap().clone();
        let w2 = store.value(&format!("{p}.w2")).unwrap().clone();
        let b2 = store.value(&format!("{p}.b2")).unwrap().clone();
        let h = w1.shape()[1];
        let w1p = NdArray::from_fn(&[4, h], |i| w1.data()[perm[i / h] * h + i % h]);
        let w2p = NdArray::from_fn(&[h, 4], |i| w2.data()[(i / 4) * 4 + perm[i % 4]]);
        let b2p = NdArray::from_fn(&[4], |i| b2.data()[perm[i]]);
        swapped.set_value(&format!("{p}.w1"), w1p).unwrap();
        swapped.set_value(&format!("{p}.w2"), w2p).unwrap();
        swapped.set_value(&format!("{p}.b2"), b2p).unwrap();
    }
    let (yr, _) = block.forward(&swapped, &paths, &rotate(&x)).unwrap();
    let diff = yr.max_abs_diff(&rotate(&y)).unwrap();
    assert!(diff < 1e-6, "half-turn diff {diff}");
}

#[test]
fn impulse_reaches_axial_and_lateral_neighbours() {
    // the readout is input-dependent, so flow is measured as the change an
    // impulse causes on top of a constant background
    let (block, store) = block_with_store(2, 36);
    let paths = PathSet::new([4, 1, 4]).unwrap();
    let base = NdArray::full(&[4, 2, 1, 4], 0.3);
    let mut x = base.clone();
    x.data_mut()[0] += 1.0;
    let (_, c0) = block.forward(&store, &paths, &base).unwrap();
    let (_, c1) = block.forward(&store, &paths, &x).unwrap();
    let delta = c1.fused().sub(c0.fused()).unwrap();
    let at = |f: usize, ch: usize, xx: usize| delta.data()[(f * 2 + ch) * 4 + xx].abs();
    let axial = (1..4).any(|f| (0..2).any(|ch| at(f, ch, 0) > 1e-9));
    let lateral = (1..4).any(|xx| (0..2).any(|ch| at(0, ch, xx) > 1e-9));
    let diagonal = (1..4).any(|f| (1..4).any(|xx| (0..2).any(|ch| at(f, ch, xx) > 1e-9)));
    assert!(axial && lateral && diagonal);
}

#[test]
fn deterministic_forward() {
    let (block, store) = block_with_store(4, 37);
    let paths = PathSet::new([2, 3, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let x = rand_arr(&[2, 4, 3, 2], &mut rng);
    let a = block.forward(&store, &paths, &x).unwrap().0;
    let b = block.forward(&store, &paths, &x).unwrap().0;
    assert_eq!(a, b);
}
