//! Derivative-free search over feedback-policy parameters, the
//! linear-quadratic reference solution and epsilon-optimality reports.

mod methods;
mod oracle;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, FeedbackPolicy};
use crate::model::ModelSpec;
use crate::objective::{estimate_gamma, estimate_n_objective, ObjectiveError, ObjectiveEstimate};
use crate::sim::{mkv_fixed_point, simulate_nsystem, SimConfig, SimError};
use crate::Scalar;

pub use oracle::{solve_lq_oracle, OracleSolution, RiccatiPoint};

#[derive(Debug, Error, Clone)]
pub enum OptimizeError {
    #[error("model is not the lq_meanfield builtin")]
    NotLq,
    #[error("Riccati solution escapes near t = {t}")]
    RiccatiBlowup { t: f64 },
    #[error("every candidate of iteration {iteration} blew up")]
    AllCandidatesBlewUp { iteration: usize },
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    CrossEntropy {
        population: usize,
        elite_frac: f64,
        iters: usize,
        /// Initial sampling standard deviation of every parameter.
        #[serde(default = "default_init_std")]
        init_std: f64,
    },
    NelderMead {
        iters: usize,
        simplex_scale: f64,
    },
    /// Exhaustive search over `resolution` points per parameter between
    /// `lower` and `upper`.
    Grid {
        resolution: usize,
        lower: f64,
        upper: f64,
    },
    /// Central-difference gradient ascent with a backtracking step.
    FdGradient {
        iters: usize,
        step: f64,
        fd_step: f64,
    },
}

fn default_init_std() -> f64 {
    1.0
}

fn default_penalty() -> f64 {
    -1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub method: Method,
    /// Seeds shared by every candidate evaluation.
    pub eval_seeds: Vec<u64>,
    /// Seeds used only to re-evaluate the final choice.
    #[serde(default)]
    pub holdout_seeds: Vec<u64>,
    /// Value assigned to runs that blow up.
    #[serde(default = "default_penalty")]
    pub penalty_blowup: f64,
    /// Seed of the search's own randomness.
    #[serde(default)]
    pub search_seed: u64,
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        if self.eval_seeds.is_empty() {
            return Err(OptimizeError::Config(
                "at least one eval seed is required".into(),
            ));
        }
        if !self.penalty_blowup.is_finite() {
            return Err(OptimizeError::Config(
                "penalty_blowup must be finite".into(),
            ));
        }
        match &self.method {
            Method::CrossEntropy {
                population,
                elite_frac,
                init_std,
                ..
            } => {
                if *population < 4 {
                    return Err(OptimizeError::Config("population must be >= 4".into()));
                }
                if !(*elite_frac > 0.0 && *elite_frac <= 0.5) {
                    return Err(OptimizeError::Config(
                        "elite_frac must lie in (0, 0.5]".into(),
                    ));
                }
                if !(*init_std > 0.0) {
                    return Err(OptimizeError::Config("init_std must be positive".into()));
                }
            }
            Method::NelderMead { simplex_scale, .. } => {
                if !(*simplex_scale > 0.0) {
                    return Err(OptimizeError::Config(
                        "simplex_scale must be positive".into(),
                    ));
                }
            }
            Method::Grid {
                resolution,
                lower,
                upper,
            } => {
                if *resolution < 2 || !(lower < upper) {
                    return Err(OptimizeError::Config(
                        "grid needs resolution >= 2 and lower < upper".into(),
                    ));
                }
            }
            Method::FdGradient { step, fd_step, .. } => {
                if !(*step > 0.0 && *fd_step > 0.0) {
                    return Err(OptimizeError::Config("step sizes must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Which objective a candidate policy is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// `n`-state objective of the interacting system.
    NSystem,
    /// Mean-field objective at the Picard fixed point of the policy.
    MkvFixedPoint { max_iter: usize, tol: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub best_value: f64,
    /// Value of the search's current centre (CE mean, best simplex vertex,
    /// gradient iterate).
    pub current_value: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult<S: Scalar> {
    pub policy: FeedbackPolicy<S>,
    /// Best training value after each iteration; nondecreasing.
    pub value_history: Vec<S>,
    /// The chosen policy re-evaluated on the hold-out seeds (the eval seeds
    /// when there are none).
    pub best: ObjectiveEstimate<S>,
    pub best_train_value: S,
    pub trace: Vec<TraceEntry>,
    pub evaluations: usize,
}

/// Writes one JSON object per line.
pub fn write_trace_jsonl<W: Write>(trace: &[TraceEntry], mut w: W) -> std::io::Result<()> {
    for e in trace {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Scores `policy` on one seed.
pub fn evaluate_policy<S: Scalar>(
    model: &ModelSpec<S>,
    sim: &SimConfig,
    policy: &FeedbackPolicy<S>,
    target: Target,
) -> Result<ObjectiveEstimate<S>, OptimizeError> {
    match target {
        Target::NSystem => {
            let out = simulate_nsystem(model, sim, policy)?.into_result()?;
            Ok(estimate_n_objective(model, &out)?)
        }
        Target::MkvFixedPoint { max_iter, tol } => {
            let fp = mkv_fixed_point(model, sim, policy, max_iter, S::lit(tol))?;
            Ok(estimate_gamma(model, &fp.output, &fp.flow)?)
        }
    }
}

/// Mean of independent per-seed estimates; the error combines the
/// per-seed errors in quadrature.
pub fn combine_estimates<S: Scalar>(parts: &[ObjectiveEstimate<S>]) -> ObjectiveEstimate<S> {
    let m = S::from_usize_lossy(parts.len().max(1));
    let mean = |f: &dyn Fn(&ObjectiveEstimate<S>) -> S| parts.iter().map(f).sum::<S>() / m;
    let running = mean(&|e| e.components.running);
    let terminal = mean(&|e| e.components.terminal);
    ObjectiveEstimate {
        value: running + terminal,
        std_error: parts
            .iter()
            .map(|e| e.std_error * e.std_error)
            .sum::<S>()
            .sqrt()
            / m,
        n_samples: parts.iter().map(|e| e.n_samples).sum(),
        components: crate::objective::Components { running, terminal },
        correlated: parts.iter().any(|e| e.correlated),
        seed: parts.first().map_or(0, |e| e.seed),
    }
}

/// Scores `policy` on each seed and combines the results.
pub fn evaluate_on_seeds<S: Scalar>(
    model: &ModelSpec<S>,
    sim: &SimConfig,
    policy: &FeedbackPolicy<S>,
    target: Target,
    seeds: &[u64],
) -> Result<ObjectiveEstimate<S>, OptimizeError> {
    let parts = seeds
        .par_iter()
        .map(|&s| evaluate_policy(model, &sim.with_seed(s), policy, target))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(combine_estimates(&parts))
}

/// Training objective over `theta`: the mean value over the eval seeds, or
/// `None` when a run blows up.
pub(crate) struct Scorer<'a, S: Scalar> {
    subspace: &'a Subspace,
    model: &'a ModelSpec<S>,
    sim: &'a SimConfig,
    template: &'a FeedbackPolicy<S>,
    target: Target,
    seeds: &'a [u64],
}

impl<S: Scalar> Scorer<'_, S> {
    pub(crate) fn score(&self, theta: &[f64]) -> Result<Option<f64>, OptimizeError> {
        let policy = self
            .template
            .with_theta(self.subspace.embed(theta).into_iter().map(S::lit).collect())?;
        match evaluate_on_seeds(self.model, self.sim, &policy, self.target, self.seeds) {
            Ok(e) => Ok(Some(e.value.as_f64()).filter(|v| v.is_finite())),
            Err(OptimizeError::Sim(SimError::NumericalBlowup { .. }))
            | Err(OptimizeError::Objective(ObjectiveError::Blowup)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Scores a batch in parallel; order of results matches the input.
    pub(crate) fn score_batch(
        &self,
        thetas: &[Vec<f64>],
    ) -> Result<Vec<Option<f64>>, OptimizeError> {
        thetas.par_iter().map(|t| self.score(t)).collect()
    }
}

/// Affine search coordinates `theta = origin + sum_j c_j basis_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subspace {
    pub origin: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
}

impl Subspace {
    /// Every coordinate of `theta` free, starting at `theta`.
    pub fn full(theta: &[f64]) -> Self {
        let n = theta.len();
        Self {
            origin: vec![0.0; n],
            basis: (0..n)
                .map(|j| {
                    let mut e = vec![0.0; n];
                    e[j] = 1.0;
                    e
                })
                .collect(),
        }
    }

    /// Piecewise-constant corrections of a linear policy with `intervals`
    /// intervals: one coordinate per parameter slot and piece, where the
    /// pieces are `pieces` contiguous groups of near-equal size.
    pub fn piecewise_corrections(origin: Vec<f64>, intervals: usize, pieces: usize) -> Self {
        let per = if intervals == 0 {
            0
        } else {
            origin.len() / intervals
        };
        let pieces = pieces.clamp(1, intervals.max(1));
        let mut basis = Vec::with_capacity(pieces * per);
        for g in 0..pieces {
            let (lo, hi) = (g * intervals / pieces, (g + 1) * intervals / pieces);
            for slot in 0..per {
                let mut e = vec![0.0; origin.len()];
                for j in lo..hi {
                    e[j * per + slot] = 1.0;
                }
                basis.push(e);
            }
        }
        Self { origin, basis }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn embed(&self, c: &[f64]) -> Vec<f64> {
        let mut theta = self.origin.clone();
        for (cj, b) in c.iter().zip(&self.basis) {
            for (t, bv) in theta.iter_mut().zip(b) {
                *t += cj * bv;
            }
        }
        theta
    }
}

/// Maximizes the chosen objective over the parameters of `init`, starting
/// from its current `theta`. Every candidate is scored on the same eval
/// seeds, so repeated scores of one `theta` are identical; the winner is
/// then re-scored on the hold-out seeds.
pub fn optimize_policy<S: Scalar>(
    model: &ModelSpec<S>,
    sim: &SimConfig,
    opt: &OptimizeConfig,
    init: &FeedbackPolicy<S>,
    target: Target,
) -> Result<OptimizeResult<S>, OptimizeError> {
    let theta0: Vec<f64> = init.theta().iter().map(|v| v.as_f64()).collect();
    optimize_in_subspace(
        model,
        sim,
        opt,
        init,
        &Subspace::full(&theta0),
        &theta0,
        target,
    )
}

/// [`optimize_policy`] over the affine coordinates of `subspace`, starting
/// from coordinates `start`. Trace entries hold full parameter vectors.
pub fn optimize_in_subspace<S: Scalar>(
    model: &ModelSpec<S>,
    sim: &SimConfig,
    opt: &OptimizeConfig,
    template: &FeedbackPolicy<S>,
    subspace: &Subspace,
    start: &[f64],
    target: Target,
) -> Result<OptimizeResult<S>, OptimizeError> {
    opt.validate()?;
    sim.validate()?;
    if subspace.origin.len() != template.theta().len()
        || subspace
            .basis
            .iter()
            .any(|b| b.len() != subspace.origin.len())
        || start.len() != subspace.dim()
    {
        return Err(OptimizeError::Config(
            "subspace does not match the policy parameters".into(),
        ));
    }
    let init = template;
    let scorer = Scorer {
        subspace,
        model,
        sim,
        template: init,
        target,
        seeds: &opt.eval_seeds,
    };
    let mut run = methods::run(
        &scorer,
        &opt.method,
        start.to_vec(),
        opt.penalty_blowup,
        opt.search_seed,
    )?;
    for e in &mut run.trace {
        e.theta = subspace.embed(&e.theta);
    }
    let policy = init.with_theta(
        subspace
            .embed(&run.best_theta)
            .into_iter()
            .map(S::lit)
            .collect(),
    )?;
    let seeds = if opt.holdout_seeds.is_empty() {
        &opt.eval_seeds
    } else {
        &opt.holdout_seeds
    };
    let best = evaluate_on_seeds(model, sim, &policy, target, seeds)?;
    Ok(OptimizeResult {
        policy,
        value_history: run.history.iter().map(|&v| S::lit(v)).collect(),
        best,
        best_train_value: S::lit(run.best_value),
        trace: run.trace,
        evaluations: run.evaluations,
    })
}

/// Reference value for an epsilon report.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a, S: Scalar> {
    Oracle(&'a OracleSolution<S>),
    BestKnown(&'a ObjectiveEstimate<S>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EpsilonReport<S: Scalar> {
    /// `max(0, reference - candidate)`.
    pub epsilon: S,
    /// Candidate and reference errors combined in quadrature.
    pub std_error: S,
    pub reference_value: S,
    pub candidate_value: S,
}

pub fn epsilon_report<S: Scalar>(
    candidate: &ObjectiveEstimate<S>,
    reference: Reference<'_, S>,
) -> EpsilonReport<S> {
    let (rv, rse) = match reference {
        Reference::Oracle(o) => (o.value, S::zero()),
        Reference::BestKnown(e) => (e.value, e.std_error),
    };
    EpsilonReport {
        epsilon: (rv - candidate.value).max(S::zero()),
        std_error: (rse * rse + candidate.std_error * candidate.std_error).sqrt(),
        reference_value: rv,
        candidate_value: candidate.value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::Components;

    fn est(value: f64, se: f64) -> ObjectiveEstimate<f64> {
        ObjectiveEstimate {
            value,
            std_error: se,
            n_samples: 10,
            components: Components {
                running: value,
                terminal: 0.0,
            },
            correlated: true,
            seed: 0,
        }
    }

    #[test]
    fn combine_averages_and_adds_errors_in_quadrature() {
        let c = combine_estimates(&[est(1.0, 0.3), est(3.0, 0.4)]);
        assert!((c.value - 2.0).abs() < 1e-15);
        assert!((c.std_error - 0.25).abs() < 1e-15);
        assert_eq!(c.n_samples, 20);
    }

    #[test]
    fn epsilon_is_clamped_at_zero() {
        let r = est(1.0, 0.3);
        let e = epsilon_report(&est(2.0, 0.4), Reference::BestKnown(&r));
        assert_eq!(e.epsilon, 0.0);
        assert!((e.std_error - 0.5).abs() < 1e-15);
        let e = epsilon_report(&est(0.25, 0.4), Reference::BestKnown(&r));
        assert!((e.epsilon - 0.75).abs() < 1e-15);
    }

    #[test]
    fn piecewise_corrections_embed() {
        let origin = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s = Subspace::piecewise_corrections(origin.clone(), 3, 2);
        assert_eq!(s.dim(), 4);
        assert_eq!(s.embed(&[0.0; 4]), origin);
        // First group is interval 0, second is intervals 1 and 2.
        assert_eq!(
            s.embed(&[1.0, 0.0, 0.0, 10.0]),
            vec![2.0, 2.0, 3.0, 14.0, 5.0, 16.0]
        );
        let f = Subspace::full(&origin);
        assert_eq!(f.embed(&origin), origin);
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizeConfig {
            method: Method::Grid {
                resolution: 3,
                lower: -1.0,
                upper: 1.0,
            },
            eval_seeds: vec![1],
            holdout_seeds: vec![],
            penalty_blowup: -1e6,
            search_seed: 0,
        };
        assert!(c.validate().is_ok());
        c.eval_seeds.clear();
        assert!(c.validate().is_err());
    }
}
