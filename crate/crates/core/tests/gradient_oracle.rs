mod common;

use common::{gradient_oracle_max_error, random_instance};
use swagppm::model::weighted_nll_gradient;
use swagppm::ModelFamily;

#[test]
fn softmax_linear_matches_finite_differences() {
    let err = gradient_oracle_max_error(ModelFamily::SoftmaxLinear, 20, 100);
    assert!(err < 1e-5, "max relative error {err:e}");
}

#[test]
fn mlp_matches_finite_differences() {
    let err = gradient_oracle_max_error(ModelFamily::Mlp1Hidden, 20, 200);
    assert!(err < 1e-5, "max relative error {err:e}");
}

#[test]
fn gradient_is_additive_in_weight_without_decay() {
    for seed in 0..20 {
        let mut inst = random_instance(seed, ModelFamily::Mlp1Hidden);
        inst.spec.weight_decay = 0.0;
        let r = &inst.records[0];
        let g = |w: f64| weighted_nll_gradient(&inst.spec, &inst.theta, &[(r, w)]).unwrap();
        let (a, b, ab) = (g(0.3), g(0.45), g(0.75));
        for ((x, y), z) in a.values().iter().zip(b.values()).zip(ab.values()) {
            assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()));
        }
    }
}
