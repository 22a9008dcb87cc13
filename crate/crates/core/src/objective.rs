//! Monte Carlo estimates of the mean-field objective under a frozen flow
//! and of the `n`-state objective under a run's own empirical flow.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelSpec;
use crate::sim::{MeasureFlow, SimError, SimOutput};
use crate::Scalar;

#[derive(Debug, Error, Clone)]
pub enum ObjectiveError {
    #[error("flow time grid differs from the output grid")]
    GridMismatch,
    #[error("output was cut short by a numerical blow-up")]
    Blowup,
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Components<S: Scalar> {
    pub running: S,
    pub terminal: S,
}

/// Sample mean of per-particle rewards with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ObjectiveEstimate<S: Scalar> {
    /// `components.running + components.terminal`.
    pub value: S,
    pub std_error: S,
    #[serde(rename = "n")]
    pub n_samples: usize,
    pub components: Components<S>,
    /// Set when the samples share an empirical measure, in which case
    /// `std_error` is not an independent-sample error.
    #[serde(default)]
    pub correlated: bool,
    pub seed: u64,
}

impl<S: Scalar> ObjectiveEstimate<S> {
    /// Aggregates per-particle `(running, terminal)` pairs.
    pub fn from_samples(samples: &[(S, S)], correlated: bool, seed: u64) -> Self {
        let n = samples.len();
        let nn = S::from_usize_lossy(n.max(1));
        let running = samples.iter().map(|s| s.0).sum::<S>() / nn;
        let terminal = samples.iter().map(|s| s.1).sum::<S>() / nn;
        let value = running + terminal;
        let var = if n > 1 {
            samples
                .iter()
                .map(|s| {
                    let e = s.0 + s.1 - value;
                    e * e
                })
                .sum::<S>()
                / S::from_usize_lossy(n - 1)
        } else {
            S::zero()
        };
        Self {
            value,
            std_error: (var / nn).sqrt(),
            n_samples: n,
            components: Components { running, terminal },
            correlated,
            seed,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain record")
    }
}

fn per_particle<S: Scalar>(
    model: &ModelSpec<S>,
    output: &SimOutput<S>,
    flow: &MeasureFlow<S>,
) -> Result<Vec<(S, S)>, ObjectiveError> {
    if output.blew_up() {
        return Err(ObjectiveError::Blowup);
    }
    let paths = &output.paths;
    if flow.len() != paths.steps() + 1 || !flow.matches_grid(paths.time_grid()) {
        return Err(ObjectiveError::GridMismatch);
    }
    let grid = paths.time_grid();
    let steps = paths.steps();
    Ok((0..paths.len())
        .into_par_iter()
        .map(|i| {
            let mut running = S::zero();
            for k in 0..steps {
                let dt = grid[k + 1] - grid[k];
                let x = paths.state(i, k);
                let m = flow.view(k);
                let mut f = S::zero();
                output.controls.visit(i, k, steps, |a, w| {
                    f = f + w * model.running_reward(grid[k], x, m, a);
                });
                running = running + dt * f;
            }
            (
                running,
                model.terminal_reward(paths.state(i, steps), flow.view(steps)),
            )
        })
        .collect())
}

/// Mean-field objective: left-endpoint quadrature of `f` plus `g`, the
/// measure argument read from `flow`.
pub fn estimate_gamma<S: Scalar>(
    model: &ModelSpec<S>,
    output: &SimOutput<S>,
    flow: &MeasureFlow<S>,
) -> Result<ObjectiveEstimate<S>, ObjectiveError> {
    Ok(ObjectiveEstimate::from_samples(
        &per_particle(model, output, flow)?,
        false,
        output.seed,
    ))
}

/// `n`-state objective: as [`estimate_gamma`] with the run's own empirical
/// flow as measure argument. The result is marked `correlated`.
pub fn estimate_n_objective<S: Scalar>(
    model: &ModelSpec<S>,
    output: &SimOutput<S>,
) -> Result<ObjectiveEstimate<S>, ObjectiveError> {
    if output.blew_up() {
        return Err(ObjectiveError::Blowup);
    }
    let flow = MeasureFlow::from_paths(model, &output.paths)?;
    Ok(ObjectiveEstimate::from_samples(
        &per_particle(model, output, &flow)?,
        true,
        output.seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::FeedbackPolicy;
    use crate::measure::uniform_grid;
    use crate::model::{ActionSet, Exponents, FnCoefficients, InitialLaw, MeasureView};
    use crate::sim::{simulate_decoupled, simulate_nsystem, SimConfig};
    use std::sync::Arc;

    fn model(
        horizon: f64,
        start: f64,
        f: impl Fn(f64, &MeasureView<f64>) -> f64 + Send + Sync + 'static,
        g: impl Fn(f64, &MeasureView<f64>) -> f64 + Send + Sync + 'static,
    ) -> ModelSpec<f64> {
        let c = FnCoefficients::new(
            |_, _, _, _, out| out[0] = 0.0,
            |_, _, _, _, out| out[0] = 0.0,
            move |_, x, m, _| f(x[0], m),
            move |x, m| g(x[0], m),
        );
        ModelSpec::new(
            "test",
            1,
            1,
            horizon,
            ActionSet::interval(-1.0, 1.0).unwrap(),
            Exponents::new(1.0, 2.0, 0.0).unwrap(),
            Arc::new(c),
            InitialLaw::Dirac { point: vec![start] },
        )
        .unwrap()
    }

    fn run(m: &ModelSpec<f64>, n: usize, steps: usize) -> SimOutput<f64> {
        let p = FeedbackPolicy::constant(vec![0.0], 1, m.action_set.clone()).unwrap();
        simulate_nsystem(m, &SimConfig::new(n, steps, 0), &p).unwrap()
    }

    #[test]
    fn constant_rewards() {
        let m = model(1.0, 0.0, |_, _| 0.0, |_, _| 1.0);
        let out = run(&m, 5, 4);
        let flow = MeasureFlow::from_paths(&m, &out.paths).unwrap();
        let e = estimate_gamma(&m, &out, &flow).unwrap();
        assert_eq!((e.value, e.std_error, e.n_samples), (1.0, 0.0, 5));
        let m = model(2.0, 0.0, |_, _| 1.0, |_, _| 0.0);
        let out = run(&m, 3, 7);
        let flow = MeasureFlow::from_paths(&m, &out.paths).unwrap();
        let e = estimate_gamma(&m, &out, &flow).unwrap();
        assert!((e.value - 2.0).abs() < 1e-15);
        assert_eq!(e.components.terminal, 0.0);
    }

    #[test]
    fn n_objective_reads_the_empirical_mean() {
        let m = model(1.0, 3.0, |_, _| 0.0, |_, mv| mv.mean[0]);
        let e = estimate_n_objective(&m, &run(&m, 1, 5)).unwrap();
        assert_eq!(e.value, 3.0);
        assert!(e.correlated);
    }

    #[test]
    fn conventions_agree_on_the_empirical_flow() {
        let m = model(
            1.0,
            0.5,
            |x, mv| -(x - mv.mean[0]).powi(2) + mv.p_moment,
            |x, mv| x * mv.mean[0],
        );
        let out = run(&m, 6, 10);
        let flow = MeasureFlow::from_paths(&m, &out.paths).unwrap();
        let a = estimate_gamma(&m, &out, &flow).unwrap();
        let b = estimate_n_objective(&m, &out).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn grid_mismatch_and_blowup() {
        let m = model(1.0, 0.0, |_, _| 0.0, |_, _| 0.0);
        let out = run(&m, 2, 4);
        let flow =
            MeasureFlow::constant(MeasureView::new(vec![0.0], 0.0), uniform_grid(1.0, 5)).unwrap();
        assert!(matches!(
            estimate_gamma(&m, &out, &flow),
            Err(ObjectiveError::GridMismatch)
        ));
        let mut bad = out.clone();
        bad.diagnostics.nan_flag = true;
        assert!(matches!(
            estimate_n_objective(&m, &bad),
            Err(ObjectiveError::Blowup)
        ));
    }

    #[test]
    fn frozen_flow_is_used_verbatim() {
        let m = model(1.0, 0.0, |_, _| 0.0, |_, mv| mv.mean[0]);
        let flow =
            MeasureFlow::constant(MeasureView::new(vec![4.0], 4.0), uniform_grid(1.0, 3)).unwrap();
        let p = FeedbackPolicy::constant(vec![0.0], 1, m.action_set.clone()).unwrap();
        let out = simulate_decoupled(&m, &SimConfig::new(2, 3, 0), &flow, &p).unwrap();
        assert_eq!(estimate_gamma(&m, &out, &flow).unwrap().value, 4.0);
        assert_eq!(estimate_n_objective(&m, &out).unwrap().value, 0.0);
    }

    #[test]
    fn json_record_fields() {
        let e = ObjectiveEstimate::from_samples(&[(1.0, 2.0), (3.0, 4.0)], false, 7);
        let v = e.to_json();
        for key in ["value", "std_error", "n", "components", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["n"], 2);
        assert_eq!(e.value, 5.0);
    }
}
