mod common;

use common::GradCase;
use pae_core::numerics::{SeededRng, Tensor};
use pae_core::side_network::{side_backward, side_forward};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_gradient_matches_central_differences(seed in any::<u64>()) {
        let case = GradCase::random(seed, 3, 8, 4, 4, 3);
        let err = case.max_relative_error(1e-5, 1e-6);
        prop_assert!(err < 1e-4, "relative error {err:e} for {:?}", case.net.config());
    }

    #[test]
    fn gradient_is_linear_in_the_residual(seed in any::<u64>(), k in 0.25f64..4.0) {
        // With W_up and alpha fixed, scaling (y − Δy) scales every gradient.
        let case = GradCase::random(seed, 3, 8, 4, 4, 3);
        let (y, state) = side_forward(&case.net, &case.acts).unwrap();
        let g1 = side_backward(&case.net, state, &y, &case.target).unwrap().flatten();
        let scaled_target = y.zip_map(&case.target, "t", |yv, t| yv - k * (yv - t)).unwrap();
        let (y2, state2) = side_forward(&case.net, &case.acts).unwrap();
        let g2 = side_backward(&case.net, state2, &y2, &scaled_target).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert!((k * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn zero_residual_gives_zero_gradient() {
    let case = GradCase::random(7, 3, 8, 4, 4, 3);
    let (y, state) = side_forward(&case.net, &case.acts).unwrap();
    let g = side_backward(&case.net, state, &y, &y).unwrap().flatten();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn wider_shapes_also_check_out() {
    let mut rng = SeededRng::new(99);
    for _ in 0..4 {
        let mut case = GradCase::random(rng.next_u64(), 4, 24, 8, 6, 4);
        case.target = Tensor::uniform(case.target.shape(), 2.0, &mut rng);
        let err = case.max_relative_error(1e-5, 1e-6);
        assert!(err < 1e-4, "relative error {err:e}");
    }
}
