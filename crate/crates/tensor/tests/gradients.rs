use strokeseg_tensor::gradcheck::{op_suite, GradCheckOptions};

#[test]
fn every_op_passes_finite_differences() {
    let reports = op_suite(GradCheckOptions::default()).unwrap();
    assert!(reports.len() >= 20);
    for r in &reports {
        println!("{:<22} max rel err {:.3e} over {} entries", r.name, r.max_rel_error, r.checked);
    }
    for r in &reports {
        assert!(r.checked > 0, "{} checked nothing", r.name);
        assert!(r.passes(1e-5), "{} failed: {:.3e}", r.name, r.max_rel_error);
    }
}

#[test]
fn suite_is_seed_independent() {
    let opts = GradCheckOptions { seed: 1234, ..Default::default() };
    for r in op_suite(opts).unwrap() {
        assert!(r.passes(1e-5), "{} failed: {:.3e}", r.name, r.max_rel_error);
    }
}
