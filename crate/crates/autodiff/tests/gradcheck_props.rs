use proptest::prelude::*;
use skd_autodiff::gradcheck::{check_gradients, GradCheckOptions, RandomGraph};
use skd_autodiff::{adam_step, AdamConfig, AdamState, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_composites_match_finite_differences(seed in any::<u64>()) {
        let (graph, params) = RandomGraph::sample(seed);
        let report = check_gradients(&graph, &params, &GradCheckOptions::default()).unwrap();
        prop_assert!(report.passes(1e-4), "{:?} {:?}", report, graph);
    }

    #[test]
    fn adam_moves_against_gradient_sign(g in -5.0f64..5.0, lr in 1e-5f64..1e-1) {
        prop_assume!(g.abs() > 1e-6);
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::scalar(g)], &mut state, lr, &AdamConfig::default()).unwrap();
        prop_assert!(params[0].item() * g < 0.0);
        prop_assert!(params[0].item().abs() <= lr * (1.0 + 1e-9));
    }
}
