//! Exhaustive grid search against the coordinated controller on a small
//! feeder with two coordinated inverters.

mod common;

use common::cic_grid::compare_with_grid;

#[test]
fn objective_matches_grid_search() {
    let r = compare_with_grid();
    assert!(r.problems.is_empty(), "{:?}", r.problems);
    assert!(r.free_curtailment > 0.1, "case must bind");
    assert!(
        r.recompute_gap < 1e-6,
        "reported objective differs from recomputation by {}",
        r.recompute_gap
    );
    assert!(r.fixed_gap <= 1e-2, "fixed reactive gap {}", r.fixed_gap);
    assert!(r.free_gap <= 1e-2, "free gap {}", r.free_gap);
}
