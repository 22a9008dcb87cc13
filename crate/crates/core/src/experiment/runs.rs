use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::cache::{content_hash, Cache};
use super::config::{ExperimentConfig, ModelSection, ScheduleSection};
use super::records::{write_records_csv, CellRecord, RecordStore};
use super::ExperimentError;
use crate::control::{FeedbackPolicy, PolicyFamily};
use crate::measure::{
    read_ensemble_file, wasserstein_exact, write_ensemble_file, EmpiricalLaw, PathEnsemble,
};
use crate::model::ModelSpec;
use crate::objective::{estimate_gamma, estimate_n_objective};
use crate::optimize::{
    epsilon_report, evaluate_on_seeds, optimize_in_subspace, optimize_policy, solve_lq_oracle,
    OracleSolution, Reference as EpsReference, RiccatiPoint, Subspace, Target,
};
use crate::rng::{derive_seed, subsample_indices};
use crate::sim::{couple_from_mkv, mkv_fixed_point, simulate_nsystem, FlowSummary, MeasureFlow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Forward,
    Converse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInfo {
    /// `lq_oracle` or `mkv_ensemble`.
    pub kind: String,
    pub value: f64,
    pub std_error: f64,
    pub cache_key: String,
}

/// Medians across seeds for one particle count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub n: usize,
    pub complete_cells: usize,
    pub median_value: Option<f64>,
    pub median_epsilon: Option<f64>,
    pub median_w2_terminal: Option<f64>,
    pub median_w2_mid: Option<f64>,
    pub median_coupling_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRun {
    pub kind: RunKind,
    pub config_hash: String,
    pub seed: u64,
    pub n_schedule: Vec<usize>,
    pub seeds_per_n: usize,
    pub reference: ReferenceInfo,
    pub records: Vec<CellRecord>,
    pub summary: Vec<ScheduleSummary>,
    /// Log-log slope of median terminal W2 against n.
    pub w2_slope: Option<f64>,
    /// Log-log slope of median epsilon against n.
    pub epsilon_slope: Option<f64>,
    /// Log-log slope of median coupling gap against n.
    pub coupling_slope: Option<f64>,
    /// Cells that failed or never ran.
    pub partial: bool,
    pub resumed_cells: usize,
}

/// Median of the finite values; `None` when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Least-squares slope of `ln y` on `ln x` over the pairs with both
/// coordinates positive; `None` with fewer than two such pairs.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Equal-weight quantization of `N(mean, var)` at the midpoints
/// `F^{-1}((i - 1/2) / m)`.
pub fn gaussian_quantile_atoms(mean: f64, var: f64, m: usize) -> Vec<f64> {
    if var <= 0.0 {
        return vec![mean; m];
    }
    let z = Normal::standard();
    (0..m)
        .map(|i| mean + var.sqrt() * z.inverse_cdf((i as f64 + 0.5) / m as f64))
        .collect()
}

/// Law the empirical marginals are compared with.
enum RefLaw {
    Gaussian { means: Vec<f64>, vars: Vec<f64> },
    Ensemble(PathEnsemble<f64>),
}

impl RefLaw {
    fn atoms(
        &self,
        step: usize,
        m: usize,
        seed: u64,
    ) -> Result<EmpiricalLaw<f64>, ExperimentError> {
        Ok(match self {
            RefLaw::Gaussian { means, vars } => {
                EmpiricalLaw::from_values(&gaussian_quantile_atoms(means[step], vars[step], m))?
            }
            RefLaw::Ensemble(e) => {
                let law = e.marginal(step)?;
                if law.len() > m {
                    law.select(&subsample_indices(seed, law.len(), m))?
                } else {
                    law
                }
            }
        })
    }
}

struct Reference {
    info: ReferenceInfo,
    policy: FeedbackPolicy<f64>,
    flow: MeasureFlow<f64>,
    law: RefLaw,
    /// Present for the closed-form case, whose policy is re-simulated on
    /// each cell's seeds as the epsilon reference.
    oracle: Option<OracleSolution<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OracleKey {
    kind: String,
    model: ModelSection,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct OracleArtifact {
    riccati_path: Vec<RiccatiPoint<f64>>,
    value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EnsembleKey {
    kind: String,
    model: ModelSection,
    steps: usize,
    n_ref: usize,
    seed: u64,
    policy: FeedbackPolicy<f64>,
    max_iter: usize,
    tol: f64,
}

#[derive(Serialize, Deserialize)]
struct EnsembleArtifact {
    flow: FlowSummary<f64>,
    value: f64,
    std_error: f64,
    ensemble_file: String,
}

fn build_reference(
    cfg: &ExperimentConfig,
    sched: &ScheduleSection,
    model: &ModelSpec<f64>,
    cache: &Cache,
) -> Result<Reference, ExperimentError> {
    if model.lq_params().is_some() {
        let key = OracleKey {
            kind: "lq_oracle".into(),
            model: cfg.model.clone(),
            steps: cfg.sim.steps,
        };
        let art: OracleArtifact = cache.get_or_compute(&key, || {
            let o = solve_lq_oracle(model, cfg.sim.steps)?;
            Ok(OracleArtifact {
                riccati_path: o.riccati_path,
                value: o.value,
            })
        })?;
        let o = OracleSolution::from_path(model, art.riccati_path, art.value)?;
        let law = RefLaw::Gaussian {
            means: o.riccati_path.iter().map(|p| p.mean).collect(),
            vars: o.riccati_path.iter().map(|p| p.variance).collect(),
        };
        return Ok(Reference {
            info: ReferenceInfo {
                kind: "lq_oracle".into(),
                value: o.value,
                std_error: 0.0,
                cache_key: content_hash(&key),
            },
            policy: o.policy.clone(),
            flow: o.mean_flow.clone(),
            law,
            oracle: Some(o),
        });
    }
    let policy = cfg.build_policy(model)?;
    let n_ref = sched.reference_factor.max(1) * sched.n.last().copied().unwrap_or(1);
    let key = EnsembleKey {
        kind: "mkv_ensemble".into(),
        model: cfg.model.clone(),
        steps: cfg.sim.steps,
        n_ref,
        seed: derive_seed(cfg.seed, 0x5EF),
        policy: policy.clone(),
        max_iter: sched.reference_max_iter,
        tol: sched.reference_tol,
    };
    let bin = cache.path_for(&key, "ens");
    let art: EnsembleArtifact = cache.get_or_compute(&key, || {
        let sim = cfg.sim_config(n_ref, key.seed);
        let fp = mkv_fixed_point(model, &sim, &policy, key.max_iter, key.tol)?;
        let est = estimate_gamma(model, &fp.output, &fp.flow)?;
        std::fs::create_dir_all(cache.dir()).map_err(super::cache::io_err(cache.dir()))?;
        write_ensemble_file(&fp.output.paths, &bin)?;
        Ok(EnsembleArtifact {
            flow: fp.flow.summary(),
            value: est.value,
            std_error: est.std_error,
            ensemble_file: bin
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
        })
    })?;
    let paths = read_ensemble_file(cache.dir().join(&art.ensemble_file))?;
    Ok(Reference {
        info: ReferenceInfo {
            kind: "mkv_ensemble".into(),
            value: art.value,
            std_error: art.std_error,
            cache_key: content_hash(&key),
        },
        policy,
        flow: MeasureFlow::from_summary(&art.flow)?,
        law: RefLaw::Ensemble(paths),
        oracle: None,
    })
}

fn cell_seed(master: u64, n: usize, seed_index: usize) -> u64 {
    derive_seed(derive_seed(master, n as u64), seed_index as u64)
}

fn w2_to_reference(
    paths: &PathEnsemble<f64>,
    step: usize,
    reference: &RefLaw,
    cap: usize,
    seed: u64,
) -> Result<f64, ExperimentError> {
    let law = paths.marginal(step)?;
    let m = law.len().min(cap);
    let emp = if law.len() > m {
        law.select(&subsample_indices(derive_seed(seed, 1), law.len(), m))?
    } else {
        law
    };
    let refl = reference.atoms(step, m, derive_seed(seed, 2))?;
    Ok(wasserstein_exact(&emp, &refl, 2.0)?)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    sched: &'a ScheduleSection,
    model: &'a ModelSpec<f64>,
    reference: &'a Reference,
    mid_step: usize,
}

fn forward_cell(
    ctx: &Ctx<'_>,
    n: usize,
    si: usize,
    warm: &FeedbackPolicy<f64>,
) -> Result<CellRecord, ExperimentError> {
    let seed = cell_seed(ctx.cfg.seed, n, si);
    let sim = ctx.cfg.sim_config(n, seed);
    let (policy, best, opt_cfg) = match &ctx.cfg.optimize {
        Some(o) => {
            let oc = ctx.cfg.optimize_config(o, seed);
            let r = optimize_policy(ctx.model, &sim, &oc, warm, o.target)?;
            (r.policy, Some(r.best), Some(oc))
        }
        None => (warm.clone(), None, None),
    };
    let holdout: Vec<u64> = match &opt_cfg {
        Some(oc) if !oc.holdout_seeds.is_empty() => oc.holdout_seeds.clone(),
        _ => vec![seed],
    };
    let target = ctx
        .cfg
        .optimize
        .as_ref()
        .map_or(Target::NSystem, |o| o.target);
    let best = match best {
        Some(b) => b,
        None => evaluate_on_seeds(ctx.model, &sim, &policy, target, &holdout)?,
    };
    let out = simulate_nsystem(ctx.model, &sim.with_seed(holdout[0]), &policy)?.into_result()?;
    let cap = ctx.sched.subsample;
    let w2_terminal = w2_to_reference(&out.paths, out.steps(), &ctx.reference.law, cap, seed)?;
    let w2_mid = w2_to_reference(&out.paths, ctx.mid_step, &ctx.reference.law, cap, seed)?;
    let eps = match &ctx.reference.oracle {
        Some(o) => {
            let r = evaluate_on_seeds(ctx.model, &sim, &o.policy, target, &holdout)?;
            epsilon_report(&best, EpsReference::BestKnown(&r))
        }
        None => {
            let r = crate::objective::ObjectiveEstimate {
                value: ctx.reference.info.value,
                std_error: ctx.reference.info.std_error,
                ..best
            };
            epsilon_report(&best, EpsReference::BestKnown(&r))
        }
    };
    Ok(CellRecord {
        optimized_value: Some(best.value),
        optimized_std_error: Some(best.std_error),
        epsilon: Some(eps.epsilon),
        epsilon_std_error: Some(eps.std_error),
        w2_terminal: Some(w2_terminal),
        w2_mid: Some(w2_mid),
        theta: policy.theta().to_vec(),
        ..CellRecord::empty(n, si, seed)
    })
}

fn converse_cell(ctx: &Ctx<'_>, n: usize, si: usize) -> Result<CellRecord, ExperimentError> {
    let seed = cell_seed(ctx.cfg.seed, n, si);
    let sim = ctx.cfg.sim_config(n, seed);
    let policy = &ctx.reference.policy;
    let c = couple_from_mkv(ctx.model, &sim, &ctx.reference.flow, policy)?;
    let applied = estimate_n_objective(ctx.model, &c.interacting)?;
    let (eps, best, theta) = match &ctx.cfg.optimize {
        Some(o) => {
            // Search a neighbourhood of the fixed policy on the same noise.
            let mut oc = ctx.cfg.optimize_config(o, seed);
            oc.eval_seeds = vec![seed];
            oc.holdout_seeds = vec![seed];
            let theta0 = policy.theta().to_vec();
            let sub = match policy.family() {
                PolicyFamily::Linear { knots } => Subspace::piecewise_corrections(
                    theta0,
                    knots.len() - 1,
                    ctx.sched.correction_pieces,
                ),
                _ => Subspace::full(&theta0),
            };
            let start = if matches!(policy.family(), PolicyFamily::Linear { .. }) {
                vec![0.0; sub.dim()]
            } else {
                policy.theta().to_vec()
            };
            let r =
                optimize_in_subspace(ctx.model, &sim, &oc, policy, &sub, &start, Target::NSystem)?;
            (
                epsilon_report(&applied, EpsReference::BestKnown(&r.best)),
                r.best,
                r.policy.theta().to_vec(),
            )
        }
        None => {
            let gamma = estimate_gamma(ctx.model, &c.decoupled, &ctx.reference.flow)?;
            (
                epsilon_report(&applied, EpsReference::BestKnown(&gamma)),
                applied,
                policy.theta().to_vec(),
            )
        }
    };
    let cap = ctx.sched.subsample;
    let paths = &c.interacting.paths;
    Ok(CellRecord {
        optimized_value: Some(best.value),
        optimized_std_error: Some(best.std_error),
        epsilon: Some(eps.epsilon),
        epsilon_std_error: Some(eps.std_error),
        w2_terminal: Some(w2_to_reference(
            paths,
            paths.steps(),
            &ctx.reference.law,
            cap,
            seed,
        )?),
        w2_mid: Some(w2_to_reference(
            paths,
            ctx.mid_step,
            &ctx.reference.law,
            cap,
            seed,
        )?),
        coupling_gap: Some(c.coupling_gap),
        theta,
        ..CellRecord::empty(n, si, seed)
    })
}

fn summarize(sched: &ScheduleSection, records: &[CellRecord]) -> Vec<ScheduleSummary> {
    sched
        .n
        .iter()
        .map(|&n| {
            let cells: Vec<&CellRecord> = records
                .iter()
                .filter(|r| r.n == n && r.is_complete())
                .collect();
            let med = |f: fn(&CellRecord) -> Option<f64>| median(cells.iter().filter_map(|r| f(r)));
            ScheduleSummary {
                n,
                complete_cells: cells.len(),
                median_value: med(|r| r.optimized_value),
                median_epsilon: med(|r| r.epsilon),
                median_w2_terminal: med(|r| r.w2_terminal),
                median_w2_mid: med(|r| r.w2_mid),
                median_coupling_gap: med(|r| r.coupling_gap),
            }
        })
        .collect()
}

fn slope_of(summary: &[ScheduleSummary], f: fn(&ScheduleSummary) -> Option<f64>) -> Option<f64> {
    let pts: Vec<(f64, f64)> = summary
        .iter()
        .filter_map(|s| f(s).map(|v| (s.n as f64, v)))
        .collect();
    loglog_slope(&pts)
}

/// Runs every `(n, seed)` cell of the schedule, skipping cells already
/// logged in `<out>/records.jsonl` under the same configuration. Failed
/// cells are recorded with their error and mark the run partial.
fn run_convergence(
    cfg: &ExperimentConfig,
    kind: RunKind,
    out: &Path,
) -> Result<ConvergenceRun, ExperimentError> {
    cfg.validate()?;
    let sched = cfg
        .schedule
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("missing [schedule] section".into()))?;
    let model = cfg.build_model()?;
    let cache = Cache::new(
        cfg.output
            .cache_dir
            .clone()
            .unwrap_or_else(|| out.join("cache")),
    );
    let reference = build_reference(cfg, sched, &model, &cache)?;
    let config_hash = content_hash(&(kind, cfg));
    let (store, done) = RecordStore::open(out.join("records.jsonl"), &config_hash)?;
    let ctx = Ctx {
        cfg,
        sched,
        model: &model,
        reference: &reference,
        mid_step: ((sched.mid_fraction * cfg.sim.steps as f64).round() as usize).min(cfg.sim.steps),
    };
    let resumed_cells = done.len();
    let initial = match kind {
        RunKind::Forward => cfg.build_policy(&model)?,
        RunKind::Converse => reference.policy.clone(),
    };

    let mut records: Vec<CellRecord> = match kind {
        // Warm starts chain each seed through the schedule, so seeds run in
        // parallel and particle counts in sequence.
        RunKind::Forward => (0..sched.seeds_per_n)
            .into_par_iter()
            .map(|si| -> Result<Vec<CellRecord>, ExperimentError> {
                let mut warm = initial.clone();
                let mut chain = Vec::with_capacity(sched.n.len());
                for &n in &sched.n {
                    let rec = match done.get(&(n, si)) {
                        Some(r) => r.clone(),
                        None => {
                            let rec = forward_cell(&ctx, n, si, &warm).unwrap_or_else(|e| {
                                CellRecord::failed(n, si, cell_seed(cfg.seed, n, si), &e)
                            });
                            store.append(&rec)?;
                            rec
                        }
                    };
                    if sched.warm_start && rec.is_complete() {
                        if let Ok(p) = initial.with_theta(rec.theta.clone()) {
                            warm = p;
                        }
                    }
                    chain.push(rec);
                }
                Ok(chain)
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect(),
        RunKind::Converse => {
            let cells: Vec<(usize, usize)> = sched
                .n
                .iter()
                .flat_map(|&n| (0..sched.seeds_per_n).map(move |si| (n, si)))
                .collect();
            cells
                .into_par_iter()
                .map(|(n, si)| -> Result<CellRecord, ExperimentError> {
                    if let Some(r) = done.get(&(n, si)) {
                        return Ok(r.clone());
                    }
                    let rec = converse_cell(&ctx, n, si).unwrap_or_else(|e| {
                        CellRecord::failed(n, si, cell_seed(cfg.seed, n, si), &e)
                    });
                    store.append(&rec)?;
                    Ok(rec)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    records.sort_by_key(|r| (r.n, r.seed_index));
    store.rewrite(&records)?;
    write_records_csv(&records, &out.join("records.csv"))?;

    let summary = summarize(sched, &records);
    let partial = records.iter().any(|r| !r.is_complete())
        || records.len() != sched.n.len() * sched.seeds_per_n;
    Ok(ConvergenceRun {
        kind,
        config_hash,
        seed: cfg.seed,
        n_schedule: sched.n.clone(),
        seeds_per_n: sched.seeds_per_n,
        reference: reference.info.clone(),
        w2_slope: slope_of(&summary, |s| s.median_w2_terminal),
        epsilon_slope: slope_of(&summary, |s| s.median_epsilon),
        coupling_slope: slope_of(&summary, |s| s.median_coupling_gap),
        records,
        summary,
        partial,
        resumed_cells,
    })
}

/// Optimizes the `n`-state system for each scheduled `n` and seed and
/// measures how far its optimally controlled law sits from the reference
/// optimal law.
pub fn run_forward_limit(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<ConvergenceRun, ExperimentError> {
    run_convergence(cfg, RunKind::Forward, out)
}

/// Applies the fixed mean-field policy to the interacting system for each
/// scheduled `n` and seed, recording its epsilon-optimality and the
/// coupling gap to the decoupled system.
pub fn run_converse_limit(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<ConvergenceRun, ExperimentError> {
    run_convergence(cfg, RunKind::Converse, out)
}
