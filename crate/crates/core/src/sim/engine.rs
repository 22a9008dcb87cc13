use std::sync::Arc;

use rayon::prelude::*;

use super::{
    AppliedControls, ControlInput, Diagnostics, MeasureConvention, MeasureFlow, SimConfig,
    SimError, SimOutput, BLOWUP_THRESHOLD,
};
use crate::control::{averaged_diffusion, psd_sqrt, ControlError, RelaxedControl};
use crate::measure::{same_grid, uniform_grid, PathEnsemble};
use crate::model::{MeasureView, ModelSpec};
use crate::rng::{CounterRng, Purpose, Stream};
use crate::{norm, Scalar};

pub(crate) enum Source<'a, S: Scalar> {
    Empirical,
    Frozen(&'a MeasureFlow<S>),
}

enum Prepared<'a, S: Scalar> {
    Feedback(&'a crate::control::FeedbackPolicy<S>),
    Relaxed {
        controls: Arc<Vec<RelaxedControl<S>>>,
        map: Arc<Vec<usize>>,
    },
}

struct Scratch<S> {
    x: Vec<S>,
    a: Vec<S>,
    b: Vec<S>,
    sigma: Vec<S>,
    cov: Vec<S>,
    xi: Vec<f64>,
}

fn prepare<'a, S: Scalar>(
    model: &ModelSpec<S>,
    cfg: &SimConfig,
    grid: &[S],
    control: ControlInput<'a, S>,
) -> Result<Prepared<'a, S>, SimError> {
    let k = model.action_set.dim();
    let relaxed = |controls: Vec<RelaxedControl<S>>| -> Result<Prepared<'a, S>, SimError> {
        let first = &controls[0];
        if controls
            .iter()
            .any(|c| !same_grid(c.time_grid(), first.time_grid()))
        {
            return Err(SimError::Config(
                "per-particle relaxed controls must share one time grid".into(),
            ));
        }
        for c in &controls {
            for (j, iv) in c.all_atoms().iter().enumerate() {
                if let Some(a) = iv
                    .iter()
                    .find(|a| a.action.len() != k || !model.action_set.contains(&a.action))
                {
                    return Err(ControlError::ActionOutOfSet {
                        interval: j,
                        action: a.action.iter().map(|v| v.as_f64()).collect(),
                    }
                    .into());
                }
            }
        }
        let map = first.interval_map(grid)?;
        Ok(Prepared::Relaxed {
            controls: Arc::new(controls),
            map: Arc::new(map),
        })
    };
    match control {
        ControlInput::Feedback(p) => {
            if p.dim_state() != model.dim_state || p.action_set().dim() != k {
                return Err(SimError::Config(
                    "policy dimensions do not match the model".into(),
                ));
            }
            Ok(Prepared::Feedback(p))
        }
        ControlInput::Shared(q) => relaxed(vec![q.clone()]),
        ControlInput::Relaxed(list) => {
            if list.len() != cfg.n_particles {
                return Err(SimError::ControlCount {
                    expected: cfg.n_particles,
                    got: list.len(),
                });
            }
            relaxed(list.to_vec())
        }
    }
}

/// Shared Euler-Maruyama loop. Particle `i` draws `max(d, d_W)` normals per
/// step from stream `(Increment, stream_of(i))`; strict actions use the
/// first `d_W` of them with `sigma`, atom mixtures the first `d` with the
/// PSD root of the averaged `sigma sigma^T`.
pub(crate) fn run<S: Scalar>(
    model: &ModelSpec<S>,
    cfg: &SimConfig,
    control: ControlInput<'_, S>,
    source: Source<'_, S>,
) -> Result<SimOutput<S>, SimError> {
    cfg.validate()?;
    let (n, steps) = (cfg.n_particles, cfg.steps);
    let (d, dw, k) = (model.dim_state, model.dim_noise, model.action_set.dim());
    let nz = d.max(dw);
    let grid = uniform_grid(model.horizon, steps);
    let dt = model.horizon / S::from_usize_lossy(steps);
    let sqdt = dt.sqrt();
    if let Source::Frozen(flow) = &source {
        if flow.len() != steps + 1 {
            return Err(SimError::FlowLength {
                expected: steps + 1,
                got: flow.len(),
            });
        }
        if !flow.matches_grid(&grid) {
            return Err(SimError::GridMismatch);
        }
    }
    let prepared = prepare(model, cfg, &grid, control)?;

    let rng = CounterRng::new(cfg.seed);
    let path_len = (steps + 1) * d;
    let mut data = vec![S::zero(); n * path_len];
    for (i, path) in data.chunks_exact_mut(path_len).enumerate() {
        model
            .initial_law
            .sample_into(&rng, cfg.stream_of(i), &mut path[..d]);
    }
    let mut streams: Vec<Stream> = (0..n)
        .map(|i| rng.stream(Purpose::Increment, cfg.stream_of(i)))
        .collect();
    let strict_store = matches!(prepared, Prepared::Feedback(_));
    let act_chunk = if strict_store { steps * k } else { 1 };
    let mut actions = vec![S::zero(); n * act_chunk];
    let mut rewards = vec![S::zero(); n];
    let order = cfg.summation_order();
    let mut gathered = vec![S::zero(); n * d];
    let mut max_abs = data
        .chunks_exact(path_len)
        .map(|p| norm(&p[..d]).as_f64())
        .fold(0.0, f64::max);
    let mut blowup = None;
    let mut completed = 0;

    let empirical_at = |data: &[S], step: usize, gathered: &mut Vec<S>| -> MeasureView<S> {
        for (slot, &i) in order.iter().enumerate() {
            let o = i * path_len + step * d;
            gathered[slot * d..(slot + 1) * d].copy_from_slice(&data[o..o + d]);
        }
        model.empirical_view(gathered)
    };

    for step in 0..steps {
        let t = grid[step];
        let owned;
        let view: &MeasureView<S> = match &source {
            Source::Empirical => {
                owned = empirical_at(&data, step, &mut gathered);
                &owned
            }
            Source::Frozen(flow) => flow.view(step),
        };
        data.par_chunks_mut(path_len)
            .zip(streams.par_iter_mut())
            .zip(rewards.par_iter_mut())
            .zip(actions.par_chunks_mut(act_chunk))
            .enumerate()
            .try_for_each_init(
                || Scratch {
                    x: vec![S::zero(); d],
                    a: vec![S::zero(); k],
                    b: vec![S::zero(); d],
                    sigma: vec![S::zero(); d * dw],
                    cov: vec![S::zero(); d * d],
                    xi: vec![0.0; nz],
                },
                |sc, (i, (((path, stream), reward), act))| -> Result<(), SimError> {
                    sc.x.copy_from_slice(&path[step * d..(step + 1) * d]);
                    stream.fill_normals(&mut sc.xi);
                    let next = &mut path[(step + 1) * d..(step + 2) * d];
                    let strict = |a: &[S], sc: &mut Scratch<S>, next: &mut [S], reward: &mut S| {
                        model.coefficients.drift(t, &sc.x, view, a, &mut sc.b);
                        model
                            .coefficients
                            .volatility(t, &sc.x, view, a, &mut sc.sigma);
                        *reward =
                            *reward + dt * model.coefficients.running_reward(t, &sc.x, view, a);
                        for r in 0..d {
                            let noise: S = (0..dw)
                                .map(|l| sc.sigma[r * dw + l] * S::lit(sc.xi[l]))
                                .sum();
                            next[r] = sc.x[r] + sc.b[r] * dt + noise * sqdt;
                        }
                    };
                    match &prepared {
                        Prepared::Feedback(p) => {
                            let mut a = std::mem::take(&mut sc.a);
                            p.evaluate_into(t, &sc.x, &mut a);
                            if !model.action_set.contains(&a) {
                                let proj = model.action_set.project(&a);
                                a.copy_from_slice(&proj);
                            }
                            act[step * k..(step + 1) * k].copy_from_slice(&a);
                            strict(&a, sc, next, reward);
                            sc.a = a;
                        }
                        Prepared::Relaxed { controls, map } => {
                            let c = if controls.len() == 1 {
                                &controls[0]
                            } else {
                                &controls[i]
                            };
                            let atoms = c.atoms(map[step]);
                            if atoms.len() == 1 {
                                strict(&atoms[0].action, sc, next, reward);
                            } else {
                                let mut drift = vec![S::zero(); d];
                                let mut run_r = S::zero();
                                for atom in atoms {
                                    model.coefficients.drift(
                                        t,
                                        &sc.x,
                                        view,
                                        &atom.action,
                                        &mut sc.b,
                                    );
                                    for (o, &b) in drift.iter_mut().zip(&sc.b) {
                                        *o = *o + atom.weight * b;
                                    }
                                    run_r = run_r
                                        + atom.weight
                                            * model.coefficients.running_reward(
                                                t,
                                                &sc.x,
                                                view,
                                                &atom.action,
                                            );
                                }
                                averaged_diffusion(
                                    model,
                                    t,
                                    &sc.x,
                                    view,
                                    atoms,
                                    &mut sc.sigma,
                                    &mut sc.cov,
                                );
                                let root = psd_sqrt(&sc.cov, d)?;
                                *reward = *reward + dt * run_r;
                                for r in 0..d {
                                    let noise: S =
                                        (0..d).map(|l| root[r * d + l] * S::lit(sc.xi[l])).sum();
                                    next[r] = sc.x[r] + drift[r] * dt + noise * sqdt;
                                }
                            }
                        }
                    }
                    Ok(())
                },
            )?;
        completed = step + 1;
        for &i in &order {
            let o = i * path_len + (step + 1) * d;
            let r = norm(&data[o..o + d]).as_f64();
            if !(r <= BLOWUP_THRESHOLD) {
                blowup = Some((step + 1, i));
                break;
            }
            max_abs = max_abs.max(r);
        }
        if blowup.is_some() {
            for path in data.chunks_exact_mut(path_len) {
                path[(step + 2) * d..]
                    .iter_mut()
                    .for_each(|v| *v = S::nan());
            }
            rewards.iter_mut().for_each(|r| *r = S::nan());
            break;
        }
    }

    if blowup.is_none() {
        let owned;
        let view: &MeasureView<S> = match &source {
            Source::Empirical => {
                owned = empirical_at(&data, steps, &mut gathered);
                &owned
            }
            Source::Frozen(flow) => flow.view(steps),
        };
        data.par_chunks(path_len)
            .zip(rewards.par_iter_mut())
            .for_each(|(path, r)| {
                *r = *r + model.coefficients.terminal_reward(&path[steps * d..], view);
            });
    }

    let controls = match prepared {
        Prepared::Feedback(_) => AppliedControls::Strict {
            dim_action: k,
            actions,
        },
        Prepared::Relaxed { controls, map } => AppliedControls::Relaxed {
            controls,
            step_interval: map,
        },
    };
    Ok(SimOutput {
        paths: PathEnsemble::new_unchecked(n, d, grid, data)?,
        controls,
        reward_samples: rewards,
        diagnostics: Diagnostics {
            steps_completed: completed,
            max_abs,
            nan_flag: blowup.is_some(),
            blowup,
        },
        convention: match source {
            Source::Empirical => MeasureConvention::Empirical,
            Source::Frozen(_) => MeasureConvention::Frozen,
        },
        seed: cfg.seed,
    })
}

/// Interacting `n`-particle system: the measure argument at step `k` is
/// the empirical measure of all particles at `t_k`, the particle itself
/// included.
///
/// A state beyond `1e8` in norm stops the run; the partial output is
/// returned with the NaN flag set, see [`SimOutput::into_result`].
pub fn simulate_nsystem<'a, S: Scalar>(
    model: &ModelSpec<S>,
    cfg: &SimConfig,
    control: impl Into<ControlInput<'a, S>>,
) -> Result<SimOutput<S>, SimError> {
    run(model, cfg, control.into(), Source::Empirical)
}

/// Independent particles driven by the frozen flow `flow`.
pub fn simulate_decoupled<'a, S: Scalar>(
    model: &ModelSpec<S>,
    cfg: &SimConfig,
    flow: &MeasureFlow<S>,
    control: impl Into<ControlInput<'a, S>>,
) -> Result<SimOutput<S>, SimError> {
    run(model, cfg, control.into(), Source::Frozen(flow))
}
