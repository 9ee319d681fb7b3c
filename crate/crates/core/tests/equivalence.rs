mod common;

use common::checks::{ccl_worst, cdem_worst, mafm_worst};

#[test]
fn mafm_matches_straight_line_oracle() {
    let worst = mafm_worst(100);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn cdem_matches_straight_line_oracle() {
    let worst = cdem_worst(100);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn ccl_matches_straight_line_oracle() {
    let worst = ccl_worst(100);
    assert!(worst <= 1e-9, "{worst}");
}
