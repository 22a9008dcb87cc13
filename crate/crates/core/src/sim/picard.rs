use super::engine::{run, Source};
use super::{ControlInput, MeasureFlow, SimConfig, SimError, SimOutput};
use crate::measure::uniform_grid;
use crate::model::ModelSpec;
use crate::rng::CounterRng;
use crate::{dist, Scalar};

#[derive(Debug, Clone)]
pub struct FixedPoint<S: Scalar> {
    pub flow: MeasureFlow<S>,
    pub iterations: usize,
    pub converged: bool,
    /// Flow change after each iteration.
    pub residuals: Vec<S>,
    /// Decoupled run under the final flow.
    pub output: SimOutput<S>,
}

/// Picard iteration for the McKean-Vlasov law under a fixed control.
///
/// Starts from the time-0 empirical law held constant, then alternates a
/// decoupled run under the current flow with replacing the flow by the
/// run's empirical flow. Every iteration reuses the same seed, so the map
/// being iterated is deterministic. Stops once the change
/// `sup_k (|mean| + |p-moment|)` drops below `tol`; after `max_iter`
/// iterations the last flow is returned with `converged = false`.
/// Convergence is only to be expected for Lipschitz coefficients.
pub fn mkv_fixed_point<'a, S: Scalar>(
    model: &ModelSpec<S>,
    cfg: &SimConfig,
    control: impl Into<ControlInput<'a, S>>,
    max_iter: usize,
    tol: S,
) -> Result<FixedPoint<S>, SimError> {
    cfg.validate()?;
    if max_iter == 0 {
        return Err(SimError::Config("max_iter must be >= 1".into()));
    }
    let control = control.into();
    let d = model.dim_state;
    let rng = CounterRng::new(cfg.seed);
    let mut x0 = vec![S::zero(); cfg.n_particles * d];
    for (slot, &i) in cfg.summation_order().iter().enumerate() {
        model
            .initial_law
            .sample_into(&rng, cfg.stream_of(i), &mut x0[slot * d..(slot + 1) * d]);
    }
    let mut flow = MeasureFlow::constant(
        model.empirical_view(&x0),
        uniform_grid(model.horizon, cfg.steps),
    )?;
    let mut residuals = Vec::new();
    let mut last = None;
    for _ in 0..max_iter {
        let out = run(model, cfg, control, Source::Frozen(&flow))?.into_result()?;
        let next = MeasureFlow::from_paths(model, &out.paths)?;
        let res = next.sup_distance(&flow);
        residuals.push(res);
        flow = next;
        last = Some(out);
        if res < tol {
            break;
        }
    }
    let iterations = residuals.len();
    let converged = residuals.last().is_some_and(|&r| r < tol);
    let output = if converged {
        last.expect("at least one iteration")
    } else {
        run(model, cfg, control, Source::Frozen(&flow))?.into_result()?
    };
    Ok(FixedPoint {
        flow,
        iterations,
        converged,
        residuals,
        output,
    })
}

/// Interacting and decoupled systems driven by the same noise and initial
/// states.
#[derive(Debug, Clone)]
pub struct Coupling<S: Scalar> {
    pub interacting: SimOutput<S>,
    pub decoupled: SimOutput<S>,
    /// `(1/n) sum_i sup_k |Z^i_k - X^i_k|^2`.
    pub coupling_gap: S,
}

/// Runs the interacting system `Z` (live empirical measure) next to the
/// decoupled system `X` (frozen `mkv_flow`) with shared randomness and
/// reports their mean squared sup-distance.
pub fn couple_from_mkv<'a, S: Scalar>(
    model: &ModelSpec<S>,
    cfg: &SimConfig,
    mkv_flow: &MeasureFlow<S>,
    control: impl Into<ControlInput<'a, S>>,
) -> Result<Coupling<S>, SimError> {
    let control = control.into();
    let interacting = run(model, cfg, control, Source::Empirical)?.into_result()?;
    let decoupled = run(model, cfg, control, Source::Frozen(mkv_flow))?.into_result()?;
    let (z, x) = (&interacting.paths, &decoupled.paths);
    let total: S = (0..z.len())
        .map(|i| {
            let sup = (0..=z.steps())
                .map(|k| dist(z.state(i, k), x.state(i, k)))
                .fold(S::zero(), S::max);
            sup * sup
        })
        .sum();
    let coupling_gap = total / S::from_usize_lossy(z.len());
    Ok(Coupling {
        interacting,
        decoupled,
        coupling_gap,
    })
}
