use std::collections::BTreeMap;

use mfc::control::FeedbackPolicy;
use mfc::model::builtin_model;
use mfc::sim::{simulate_nsystem, SimConfig};
use mfc::ModelSpec;
use proptest::prelude::*;

fn ou(kappa: f64, sigma0: f64, mean: f64, std: f64) -> ModelSpec {
    let p = BTreeMap::from([
        ("kappa".to_string(), kappa),
        ("sigma0".to_string(), sigma0),
        ("init_mean".to_string(), mean),
        ("init_std".to_string(), std),
    ]);
    builtin_model("ou_chaos", &p).unwrap()
}

fn column(out: &mfc::SimOutput, k: usize) -> Vec<f64> {
    (0..out.n()).map(|i| out.paths.state(i, k)[0]).collect()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (
        m,
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn ou_variance_follows_its_ode(kappa in 0.2f64..2.0, sigma0 in 0.5f64..1.5, seed in any::<u64>()) {
        let model = ou(kappa, sigma0, 0.0, 1.0);
        let policy = FeedbackPolicy::constant(vec![0.0], 1, model.action_set.clone()).unwrap();
        let (n, steps) = (4000, 400);
        let out = simulate_nsystem(&model, &SimConfig::new(n, steps, seed), &policy).unwrap();
        for k in [100, 200, 400] {
            let t = k as f64 / steps as f64;
            let decay = (-2.0 * kappa * t).exp();
            let exact = decay + sigma0 * sigma0 * (1.0 - decay) / (2.0 * kappa);
            let (_, v) = mean_var(&column(&out, k));
            // Gaussian law: Var(sample variance) = 2 v^2 / (n - 1).
            let se = exact * (2.0 / (n as f64 - 1.0)).sqrt();
            prop_assert!((v - exact).abs() < 4.0 * se, "t={} v={} exact={}", t, v, exact);
        }
    }

    #[test]
    fn second_moment_stays_in_its_envelope(
        kappa in 0.0f64..3.0,
        sigma0 in 0.0f64..2.0,
        m0 in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let model = ou(kappa, sigma0, m0, 1.0);
        let policy = FeedbackPolicy::constant(vec![0.0], 1, model.action_set.clone()).unwrap();
        let out = simulate_nsystem(&model, &SimConfig::new(1000, 100, seed), &policy).unwrap();
        let start: f64 = column(&out, 0).iter().map(|x| x * x).sum::<f64>() / 1000.0;
        let envelope = (start + sigma0 * sigma0 * model.horizon) * 1.1 + 1e-12;
        for k in 0..=100 {
            let m2 = column(&out, k).iter().map(|x| x * x).sum::<f64>() / 1000.0;
            prop_assert!(m2 <= envelope, "k={} m2={} envelope={}", k, m2, envelope);
        }
    }
}

#[test]
fn interacting_mean_is_conserved() {
    // The drift kappa (mean - x) sums to zero over particles.
    let model = ou(2.0, 0.0, 0.7, 1.0);
    let policy = FeedbackPolicy::constant(vec![0.0], 1, model.action_set.clone()).unwrap();
    let out = simulate_nsystem(&model, &SimConfig::new(500, 50, 4), &policy).unwrap();
    let m0 = mean_var(&column(&out, 0)).0;
    for k in 1..=50 {
        assert!((mean_var(&column(&out, k)).0 - m0).abs() < 1e-12);
    }
}
