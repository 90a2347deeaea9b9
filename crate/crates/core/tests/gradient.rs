mod common;

#[test]
fn backprop_matches_central_differences() {
    let worst = common::gradient_check(100, 7);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}
