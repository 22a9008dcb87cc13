use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::ExperimentError;
use crate::control::{Atom, RelaxedControl};
use crate::measure::uniform_grid;
use crate::model::ModelSpec;
use crate::objective::{estimate_n_objective, ObjectiveEstimate};
use crate::optimize::{combine_estimates, optimize_policy, OptimizeResult};
use crate::rng::derive_seed;
use crate::sim::simulate_nsystem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatterRow {
    pub exponent: usize,
    /// Cells per relaxed-control interval, `2^exponent`.
    pub refinement: usize,
    pub strict_value: f64,
    pub strict_std_error: f64,
    /// `|strict - relaxed|` on common random numbers.
    pub gap: f64,
    /// Strict and relaxed errors combined in quadrature.
    pub std_error: f64,
    /// Bounded-Lipschitz distance between the two controls on `[0,T] x A`.
    pub control_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrictOptimum {
    pub theta: Vec<f64>,
    pub strict: ObjectiveEstimate<f64>,
    /// The relaxed control on the same hold-out seeds and particle count.
    pub relaxed: ObjectiveEstimate<f64>,
    /// `relaxed - strict`; positive when the relaxed control does better.
    pub relaxation_gap: f64,
    pub std_error: f64,
    pub value_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatterStudy {
    pub seed: u64,
    pub relaxed: ObjectiveEstimate<f64>,
    pub rows: Vec<ChatterRow>,
    pub strict_optimum: Option<StrictOptimum>,
}

/// The relaxed control of the `[chatter]` section on the simulation grid.
pub fn configured_relaxed_control(
    cfg: &ExperimentConfig,
    model: &ModelSpec<f64>,
) -> Result<RelaxedControl<f64>, ExperimentError> {
    let c = cfg
        .chatter
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("missing [chatter] section".into()))?;
    let atoms: Vec<Atom<f64>> = c
        .actions
        .iter()
        .zip(&c.weights)
        .map(|(a, &w)| Atom::new(a.clone(), w))
        .collect();
    let q = RelaxedControl::stationary(
        atoms,
        uniform_grid(model.horizon, c.intervals),
        &model.action_set,
    )?;
    Ok(match c.truncate {
        Some(r) => q.truncate(r, &model.action_set),
        None => q,
    })
}

fn evaluate_control(
    model: &ModelSpec<f64>,
    cfg: &ExperimentConfig,
    n: usize,
    control: &RelaxedControl<f64>,
    seeds: &[u64],
) -> Result<ObjectiveEstimate<f64>, ExperimentError> {
    let parts = seeds
        .par_iter()
        .map(|&s| -> Result<ObjectiveEstimate<f64>, ExperimentError> {
            let out = simulate_nsystem(model, &cfg.sim_config(n, s), control)?.into_result()?;
            Ok(estimate_n_objective(model, &out)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(combine_estimates(&parts))
}

/// Compares the relaxed control with its chattered strict approximations
/// `chatter(2^j)`, `j = min_exponent..=max_exponent`, all simulated on the
/// same seeds. Optionally also searches the strict policy family and
/// reports how far its best value stays below the relaxed one.
pub fn run_chattering_study(cfg: &ExperimentConfig) -> Result<ChatterStudy, ExperimentError> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let c = cfg
        .chatter
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("missing [chatter] section".into()))?;
    let q = configured_relaxed_control(cfg, &model)?;
    let n = cfg.sim.n_particles;
    let seeds: Vec<u64> = (0..c.seeds as u64)
        .map(|j| derive_seed(cfg.seed, j))
        .collect();
    let relaxed = evaluate_control(&model, cfg, n, &q, &seeds)?;
    let mut rows = Vec::new();
    for j in c.min_exponent..=c.max_exponent {
        let refinement = 1usize << j;
        let strict = q.chatter(refinement)?;
        let est = evaluate_control(&model, cfg, n, &strict, &seeds)?;
        rows.push(ChatterRow {
            exponent: j,
            refinement,
            strict_value: est.value,
            strict_std_error: est.std_error,
            gap: (est.value - relaxed.value).abs(),
            std_error: est.std_error.hypot(relaxed.std_error),
            control_distance: strict.bounded_lipschitz_distance(&q)?,
        });
    }
    let strict_optimum = if c.optimize_strict {
        let o = cfg.optimize.as_ref().ok_or_else(|| {
            ExperimentError::Config("optimize_strict needs an [optimize] section".into())
        })?;
        let ns = c.strict_particles.unwrap_or(n);
        let oc = cfg.optimize_config(o, derive_seed(cfg.seed, 0xC4A7));
        let init = cfg.build_policy(&model)?;
        let r: OptimizeResult<f64> = optimize_policy(
            &model,
            &cfg.sim_config(ns, oc.eval_seeds[0]),
            &oc,
            &init,
            o.target,
        )?;
        let holdout = if oc.holdout_seeds.is_empty() {
            &oc.eval_seeds
        } else {
            &oc.holdout_seeds
        };
        let rel = evaluate_control(&model, cfg, ns, &q, holdout)?;
        Some(StrictOptimum {
            theta: r.policy.theta().to_vec(),
            relaxation_gap: rel.value - r.best.value,
            std_error: rel.std_error.hypot(r.best.std_error),
            strict: r.best,
            relaxed: rel,
            value_history: r.value_history,
        })
    } else {
        None
    };
    Ok(ChatterStudy {
        seed: cfg.seed,
        relaxed,
        rows,
        strict_optimum,
    })
}
