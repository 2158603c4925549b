mod common;

use asars::autodiff::grad_check;
use asars::model::Variant;
use common::*;

#[test]
fn every_variant_passes_the_gradient_check() {
    let slices = gradcheck_slices(6, 3);
    assert!(slices.iter().any(|s| s.reset_mask.iter().any(|&r| r)) || slices.len() > 1);
    for (k, v) in Variant::ALL.into_iter().enumerate() {
        let mut m = gradcheck_model(v, 8, k % 2 == 1, 10 + k as u64);
        let cfg = m.config.clone();
        let err = grad_check(
            |g, b| window_objective(&cfg, g, b, &slices),
            &mut m.params,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "{v}: max relative error {err:e}");
    }
}
