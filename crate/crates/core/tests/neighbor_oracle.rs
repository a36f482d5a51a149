mod common;

use common::oracle_suite;

#[test]
fn kd_tree_agrees_with_linear_scan_on_random_cases() {
    let r = oracle_suite(1000, 11);
    assert_eq!(r.cases, 1000);
    assert_eq!(r.mismatches, 0, "{r:?}");
}

#[test]
fn component_gaps_never_exceed_the_returned_distance() {
    let r = oracle_suite(1000, 12);
    assert!(r.queries >= 1000);
    assert_eq!(r.bound_violations, 0, "{r:?}");
}
