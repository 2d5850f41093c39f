use isoscan_core::checks::{grad_cases, run_selftest, scan_integrity, selftest_registry, SelftestOptions};

#[test]
fn exhaustive_scan_integrity() {
    let n = scan_integrity(64, false).unwrap();
    // every (F, h, W) with F·h·W ≤ 64, times 8 branches
    let dims = (1..=64usize)
        .flat_map(|f| (1..=64 / f).map(move |h| (f, h)))
        .map(|(f, h)| 64 / (f * h))
        .sum::<usize>();
    assert_eq!(n, 8 * dims);
}

#[test]
fn registry_is_large_enough_and_unique() {
    let names: Vec<String> = selftest_registry().into_iter().map(|c| c.name).collect();
    assert!(names.len() >= 12, "{}", names.len());
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    for c in grad_cases() {
        assert!(names.contains(&format!("gradcheck.{}", c.name)));
    }
}

#[test]
fn selftest_passes_and_corruption_is_named() {
    let out = run_selftest(&SelftestOptions::default());
    let failed: Vec<_> = out.iter().filter(|o| !o.passed).map(|o| (&o.name, &o.detail)).collect();
    assert!(failed.is_empty(), "{failed:?}");

    let out = run_selftest(&SelftestOptions {
        corrupt_path_table: true,
    });
    let failed: Vec<_> = out.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    assert_eq!(failed, ["scan.integrity"]);
}

#[test]
fn gradient_checks_hold_over_seeds() {
    for c in grad_cases() {
        let seeds = if c.name == "micro_model" { 2 } else { 5 };
        for s in 0..seeds {
            let r = c.run(s).unwrap();
            assert!(r.max_rel_err < c.tolerance, "{} seed {s}: {r:?}", c.name);
        }
    }
}
