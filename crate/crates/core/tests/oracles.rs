mod common;

use common::checks;

fn assert_ok(r: checks::Outcome) {
    match r {
        Ok(msg) => println!("{msg}"),
        Err(msg) => panic!("{msg}"),
    }
}

#[test]
fn linear_attention_matches_dense_oracle() {
    assert_ok(checks::linear_attention(100));
}

#[test]
fn knn_matches_exhaustive_search() {
    assert_ok(checks::knn(100));
}

#[test]
fn iou_matches_monte_carlo() {
    assert_ok(checks::iou(20, 200_000));
}

#[test]
fn metrics_match_integration() {
    assert_ok(checks::metric_identities());
}

#[test]
fn permutation_and_sharing_identities() {
    assert_ok(checks::equivariance());
}

#[test]
fn published_sized_maps() {
    assert_ok(checks::shapes());
}

#[test]
fn gradient_suite() {
    assert_ok(checks::gradients(0, 8));
}
