//! Gradient suite: every op's analytic backward against central finite
//! differences. The harness lives in `heldout_core::gradcheck` (forward
//! evaluations only, independent of the VJP code).

use heldout_core::gradcheck::{run_suite, CHECKED_OPS, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    let reports = run_suite(0xfeed, 25);
    let covered: Vec<&str> = reports.iter().map(|r| r.op).collect();
    assert_eq!(covered, CHECKED_OPS, "suite must cover every op");
    for r in &reports {
        assert!(
            r.max_rel_err < TOLERANCE,
            "{}: max rel err {:.3e} over {} instances",
            r.op,
            r.max_rel_err,
            r.instances
        );
    }
}

#[test]
fn suite_is_seed_sensitive_but_stable() {
    let a = run_suite(1, 3);
    let b = run_suite(1, 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
    }
}
