use std::collections::BTreeMap;

use mfc::control::FeedbackPolicy;
use mfc::model::builtin_model;
use mfc::objective::estimate_n_objective;
use mfc::sim::{simulate_nsystem, SimConfig};
use mfc::ModelSpec;
use proptest::prelude::*;

fn lq() -> ModelSpec {
    builtin_model(
        "lq_meanfield",
        &BTreeMap::from([("init_mean".to_string(), 0.5)]),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn values_scale_with_the_costs(c in 0.01f64..100.0, k in -2.0f64..0.0, seed in any::<u64>()) {
        let model = lq();
        let mut p = *model.lq_params().unwrap();
        for w in [&mut p.q, &mut p.q_bar, &mut p.r, &mut p.q_t, &mut p.q_bar_t] {
            *w *= c;
        }
        let scaled = model.with_lq_params(p).unwrap();
        let policy = FeedbackPolicy::linear_zero(vec![0.0, 1.0], 1, model.action_set.clone())
            .unwrap()
            .with_theta(vec![k, 0.0])
            .unwrap();
        let sim = SimConfig::new(64, 20, seed);
        let a = estimate_n_objective(&model, &simulate_nsystem(&model, &sim, &policy).unwrap()).unwrap();
        let b = estimate_n_objective(&scaled, &simulate_nsystem(&scaled, &sim, &policy).unwrap()).unwrap();
        prop_assert!((b.value - c * a.value).abs() <= 1e-10 * (1.0 + (c * a.value).abs()));
        prop_assert!((b.std_error - c * a.std_error).abs() <= 1e-10 * (1.0 + c * a.std_error));
    }

    #[test]
    fn value_is_never_positive_for_costs(seed in any::<u64>(), k in -3.0f64..3.0) {
        let model = lq();
        let policy = FeedbackPolicy::linear_zero(vec![0.0, 1.0], 1, model.action_set.clone())
            .unwrap()
            .with_theta(vec![k, 0.1])
            .unwrap();
        let out = simulate_nsystem(&model, &SimConfig::new(32, 10, seed), &policy).unwrap();
        let e = estimate_n_objective(&model, &out).unwrap();
        prop_assert!(e.value <= 0.0);
        prop_assert!(e.std_error >= 0.0);
        prop_assert!((e.value - e.components.running - e.components.terminal).abs() < 1e-12);
    }
}

#[test]
fn deterministic_path_reward_is_a_left_riemann_sum() {
    let model: ModelSpec =
        builtin_model("bang_relaxed", &BTreeMap::from([("eps".to_string(), 0.0)])).unwrap();
    let policy = FeedbackPolicy::constant(vec![1.0], 1, model.action_set.clone()).unwrap();
    let steps = 10;
    let out = simulate_nsystem(&model, &SimConfig::new(8, steps, 0), &policy).unwrap();
    let e = estimate_n_objective(&model, &out).unwrap();
    let h = 1.0 / steps as f64;
    let exact: f64 = -(0..steps).map(|k| h * (k as f64 * h).powi(2)).sum::<f64>();
    assert!((e.value - exact).abs() < 1e-12, "{} vs {exact}", e.value);
    assert!(e.std_error.abs() < 1e-12);
}

#[test]
fn ou_terminal_reward_is_the_spread() {
    let model: ModelSpec = builtin_model("ou_chaos", &BTreeMap::new()).unwrap();
    let policy = FeedbackPolicy::constant(vec![0.0], 1, model.action_set.clone()).unwrap();
    let out = simulate_nsystem(&model, &SimConfig::new(300, 40, 5), &policy).unwrap();
    let xs: Vec<f64> = (0..300).map(|i| out.paths.state(i, 40)[0]).collect();
    let m = xs.iter().sum::<f64>() / 300.0;
    let spread = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 300.0;
    let e = estimate_n_objective(&model, &out).unwrap();
    assert!((e.value + spread).abs() < 1e-12);
}
