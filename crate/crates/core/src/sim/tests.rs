use std::collections::BTreeMap;
use std::sync::Arc;

use super::*;
use crate::control::{Atom, FeedbackPolicy};
use crate::measure::uniform_grid;
use crate::model::{
    builtin_model, ActionSet, Exponents, FnCoefficients, InitialLaw, MeasureView, ModelSpec,
};

fn scalar_model(
    drift: impl Fn(f64, f64, &MeasureView<f64>, f64) -> f64 + Send + Sync + 'static,
    sigma: f64,
    start: f64,
) -> ModelSpec<f64> {
    let c = FnCoefficients::new(
        move |t, x, m, a, out| out[0] = drift(t, x[0], m, a[0]),
        move |_, _, _, _, out| out[0] = sigma,
        |_, _, _, _| 0.0,
        |_, _| 0.0,
    );
    ModelSpec::new(
        "test",
        1,
        1,
        1.0,
        ActionSet::interval(-1.0, 1.0).unwrap(),
        Exponents::new(1.0, 2.0, 0.0).unwrap(),
        Arc::new(c),
        InitialLaw::Dirac { point: vec![start] },
    )
    .unwrap()
}

fn zero_policy(model: &ModelSpec<f64>) -> FeedbackPolicy<f64> {
    FeedbackPolicy::constant(
        vec![0.0; model.action_set.dim()],
        model.dim_state,
        model.action_set.clone(),
    )
    .unwrap()
}

fn ou(kappa: f64, sigma0: f64, mean: f64, std: f64) -> ModelSpec<f64> {
    let p = BTreeMap::from([
        ("kappa".to_string(), kappa),
        ("sigma0".to_string(), sigma0),
        ("init_mean".to_string(), mean),
        ("init_std".to_string(), std),
    ]);
    builtin_model("ou_chaos", &p).unwrap()
}

#[test]
fn still_particle_stays_put() {
    let m = scalar_model(|_, _, _, _| 0.0, 0.0, 0.0);
    let out = simulate_nsystem(&m, &SimConfig::new(1, 10, 3), &zero_policy(&m)).unwrap();
    assert!(out.paths.data().iter().all(|&v| v == 0.0));
    assert_eq!(out.reward_samples, vec![0.0]);
    assert!(!out.blew_up());
}

#[test]
fn mean_reverting_pair_at_its_mean_is_constant() {
    let m = ou(1.0, 0.0, 1.0, 0.0);
    let out = simulate_nsystem(&m, &SimConfig::new(2, 50, 0), &zero_policy(&m)).unwrap();
    assert!(out.paths.data().iter().all(|&v| v == 1.0));
}

#[test]
fn frozen_flow_drift_integrates_the_means() {
    let m = scalar_model(|_, _, mv, _| mv.mean[0], 0.0, 0.0);
    let steps = 8;
    let grid = uniform_grid(1.0, steps);
    let means: Vec<f64> = grid.iter().map(|t| t * t).collect();
    let flow = MeasureFlow::new(
        grid.clone(),
        means
            .iter()
            .map(|&v| MeasureView::new(vec![v], v.abs()))
            .collect(),
    )
    .unwrap();
    let out =
        simulate_decoupled(&m, &SimConfig::new(3, steps, 1), &flow, &zero_policy(&m)).unwrap();
    let mut acc = 0.0;
    for k in 0..=steps {
        assert_eq!(out.paths.state(2, k)[0], acc);
        if k < steps {
            acc += means[k] * (1.0 / steps as f64);
        }
    }
    assert_eq!(out.convention, MeasureConvention::Frozen);
}

#[test]
fn flow_length_and_grid_are_checked() {
    let m = scalar_model(|_, _, _, _| 0.0, 0.0, 0.0);
    let flow =
        MeasureFlow::constant(MeasureView::new(vec![0.0], 0.0), uniform_grid(1.0, 4)).unwrap();
    let p = zero_policy(&m);
    assert!(matches!(
        simulate_decoupled(&m, &SimConfig::new(2, 5, 0), &flow, &p),
        Err(SimError::FlowLength {
            expected: 6,
            got: 5
        })
    ));
    let other =
        MeasureFlow::constant(MeasureView::new(vec![0.0], 0.0), uniform_grid(2.0, 5)).unwrap();
    assert!(matches!(
        simulate_decoupled(&m, &SimConfig::new(2, 5, 0), &other, &p),
        Err(SimError::GridMismatch)
    ));
    assert!(simulate_nsystem(&m, &SimConfig::new(0, 5, 0), &p).is_err());
}

#[test]
fn blowup_is_flagged_with_partial_output() {
    let m = scalar_model(|_, x, _, _| 10.0 * x * x, 0.0, 1.0);
    let out = simulate_nsystem(&m, &SimConfig::new(4, 100, 0), &zero_policy(&m)).unwrap();
    assert!(out.blew_up());
    let (step, _) = out.diagnostics.blowup.unwrap();
    assert!(step < 100);
    assert!(out.paths.state(0, 0)[0] == 1.0);
    assert!(out.paths.state(0, 100)[0].is_nan());
    assert!(out.reward_samples.iter().all(|r| r.is_nan()));
    assert!(matches!(
        out.into_result(),
        Err(SimError::NumericalBlowup { .. })
    ));
}

#[test]
fn relaxed_controls_need_one_per_particle_and_aligned_grid() {
    let model = builtin_model::<f64>("bang_relaxed", &BTreeMap::new()).unwrap();
    let q = RelaxedControl::stationary(
        vec![Atom::new(vec![-1.0], 0.5), Atom::new(vec![1.0], 0.5)],
        uniform_grid(1.0, 4),
        &model.action_set,
    )
    .unwrap();
    let cfg = SimConfig::new(3, 8, 0);
    assert!(matches!(
        simulate_nsystem(&model, &cfg, &vec![q.clone(); 2]),
        Err(SimError::ControlCount {
            expected: 3,
            got: 2
        })
    ));
    assert!(simulate_nsystem(&model, &cfg, &vec![q.clone(); 3]).is_ok());
    assert!(simulate_nsystem(&model, &SimConfig::new(3, 6, 0), &q).is_err());
}

#[test]
fn single_atom_relaxed_matches_feedback() {
    let model = builtin_model::<f64>("bang_relaxed", &BTreeMap::new()).unwrap();
    let cfg = SimConfig::new(5, 16, 9);
    let q = RelaxedControl::stationary(
        vec![Atom::new(vec![1.0], 1.0)],
        uniform_grid(1.0, 2),
        &model.action_set,
    )
    .unwrap();
    let p = FeedbackPolicy::constant(vec![1.0], 1, model.action_set.clone()).unwrap();
    let a = simulate_nsystem(&model, &cfg, &q).unwrap();
    let b = simulate_nsystem(&model, &cfg, &p).unwrap();
    assert_eq!(a.paths, b.paths);
    assert_eq!(a.reward_samples, b.reward_samples);
}

#[test]
fn same_seed_same_output_across_pool_sizes() {
    let m = ou(1.0, 1.0, 0.0, 1.0);
    let cfg = SimConfig::new(300, 40, 77);
    let p = zero_policy(&m);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_nsystem(&m, &cfg, &p).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.paths, b.paths);
    assert_eq!(a.reward_samples, b.reward_samples);
    let c = simulate_nsystem(&m, &cfg.with_seed(78), &p).unwrap();
    assert_ne!(a.paths, c.paths);
}

#[test]
fn permuted_streams_permute_outputs() {
    let m = ou(2.0, 0.7, 0.5, 1.0);
    let n = 50;
    let cfg = SimConfig::new(n, 30, 5);
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let base = simulate_nsystem(&m, &cfg, &zero_policy(&m)).unwrap();
    let moved = simulate_nsystem(
        &m,
        &cfg.with_streams(perm.iter().map(|&i| i as u64).collect()),
        &zero_policy(&m),
    )
    .unwrap();
    assert_eq!(moved.paths, base.paths.permuted(&perm));
    for (slot, &i) in perm.iter().enumerate() {
        assert_eq!(moved.reward_samples[slot], base.reward_samples[i]);
    }
}

#[test]
fn picard_recovers_exponential_decay() {
    let m = scalar_model(|_, _, mv, _| -mv.mean[0], 0.0, 1.0);
    let steps = 100;
    let fp = mkv_fixed_point(
        &m,
        &SimConfig::new(4, steps, 0),
        &zero_policy(&m),
        200,
        1e-12,
    )
    .unwrap();
    assert!(fp.converged);
    for (k, mean) in fp.flow.means().iter().enumerate() {
        let t = k as f64 / steps as f64;
        assert!((mean[0] - (-t).exp()).abs() < 0.5 / steps as f64);
    }
}

#[test]
fn picard_keeps_the_ou_mean() {
    // Without noise the scheme moves the particle mean by
    // kappa (flow mean - particle mean) dt, which vanishes from the start.
    let m = ou(3.0, 0.0, 0.7, 1.0);
    for iters in 1..4 {
        let fp = mkv_fixed_point(
            &m,
            &SimConfig::new(200, 20, 2),
            &zero_policy(&m),
            iters,
            0.0,
        )
        .unwrap();
        let means = fp.flow.means();
        for mean in &means {
            assert!((mean[0] - means[0][0]).abs() < 1e-12);
        }
        assert_eq!(fp.iterations, iters);
        assert!(!fp.converged);
    }
}

#[test]
fn coupling_without_interaction_has_no_gap() {
    let m = scalar_model(|_, x, _, _| -x, 0.8, 0.3);
    let fp = mkv_fixed_point(&m, &SimConfig::new(20, 10, 4), &zero_policy(&m), 5, 1e-9).unwrap();
    let c = couple_from_mkv(&m, &SimConfig::new(20, 10, 4), &fp.flow, &zero_policy(&m)).unwrap();
    assert_eq!(c.coupling_gap, 0.0);
    assert_eq!(c.interacting.paths, c.decoupled.paths);
}

#[test]
fn defect_vanishes_without_motion() {
    let m = scalar_model(|_, _, _, _| 0.0, 0.0, 2.0);
    let cfg = SimConfig::new(10, 10, 0);
    let out = simulate_nsystem(&m, &cfg, &zero_policy(&m)).unwrap();
    let flow = MeasureFlow::from_paths(&m, &out.paths).unwrap();
    for f in [
        TestFunction::Coordinate { index: 0 },
        TestFunction::Quadratic,
        TestFunction::Bump {
            center: vec![1.0],
            width: 0.5,
        },
    ] {
        let d = martingale_defect(&m, &out, &flow, &f, 0.0, 1.0).unwrap();
        assert_eq!((d.mean, d.std_error), (0.0, 0.0));
    }
    assert!(matches!(
        martingale_defect(&m, &out, &flow, &TestFunction::Quadratic, 0.5, 0.25),
        Err(SimError::GridMismatch)
    ));
    assert!(martingale_defect(&m, &out, &flow, &TestFunction::Quadratic, 0.0, 0.33).is_err());
}

#[test]
fn test_function_derivatives() {
    let f: TestFunction<f64> = TestFunction::Bump {
        center: vec![0.2, -0.1],
        width: 0.7,
    };
    let x = [0.5, 0.3];
    let h = 1e-5;
    let mut g = [0.0; 2];
    let mut hess = [0.0; 4];
    f.gradient(&x, &mut g);
    f.hessian(&x, &mut hess);
    for i in 0..2 {
        let mut xp = x;
        let mut xm = x;
        xp[i] += h;
        xm[i] -= h;
        assert!(((f.value(&xp) - f.value(&xm)) / (2.0 * h) - g[i]).abs() < 1e-8);
        let (mut gp, mut gm) = ([0.0; 2], [0.0; 2]);
        f.gradient(&xp, &mut gp);
        f.gradient(&xm, &mut gm);
        for j in 0..2 {
            assert!(((gp[j] - gm[j]) / (2.0 * h) - hess[j * 2 + i]).abs() < 1e-7);
        }
    }
}

#[test]
fn summary_csv() {
    let m = scalar_model(|_, _, _, _| 0.0, 0.0, 1.5);
    let out = simulate_nsystem(&m, &SimConfig::new(2, 2, 0), &zero_policy(&m)).unwrap();
    let mut buf = Vec::new();
    out.write_summary_csv(&mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "particle,x0_T,reward\n0,1.5,0\n1,1.5,0\n"
    );
}
