//! Euler-Maruyama engines for the interacting particle system and for the
//! decoupled dynamics under a frozen measure flow, the Picard iteration for
//! the McKean-Vlasov law, the trajectorial coupling of the two systems and
//! martingale-defect diagnostics.

mod defect;
mod engine;
mod flow;
mod picard;

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{Atom, ControlError, FeedbackPolicy, RelaxedControl};
use crate::measure::{MeasureError, PathEnsemble};
use crate::model::ModelError;
use crate::Scalar;

pub use defect::{
    martingale_defect, martingale_defect_weighted, DefectEstimate, DefectWeight, TestFunction,
};
pub use engine::{simulate_decoupled, simulate_nsystem};
pub use flow::{FlowSummary, MeasureFlow};
pub use picard::{couple_from_mkv, mkv_fixed_point, Coupling, FixedPoint};

/// States beyond this norm abort the run.
pub const BLOWUP_THRESHOLD: f64 = 1e8;

#[derive(Debug, Error, Clone)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("numerical blow-up at step {step} (particle {particle})")]
    NumericalBlowup { step: usize, particle: usize },
    #[error("flow has {got} entries but the grid has {expected} points")]
    FlowLength { expected: usize, got: usize },
    #[error("expected {expected} relaxed controls, got {got}")]
    ControlCount { expected: usize, got: usize },
    #[error("flow time grid differs from the simulation grid")]
    GridMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
}

/// Particle count, uniform grid and seed of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_particles: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Noise-stream index of each particle slot; the identity when absent.
    /// Two runs whose stream maps are permutations of each other produce
    /// permuted outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub streams: Option<Vec<u64>>,
}

impl SimConfig {
    pub fn new(n_particles: usize, steps: usize, seed: u64) -> Self {
        Self {
            n_particles,
            steps,
            seed,
            scheme: Scheme::EulerMaruyama,
            streams: None,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_streams(&self, streams: Vec<u64>) -> Self {
        Self {
            streams: Some(streams),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_particles == 0 {
            return Err(SimError::Config("n_particles must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(SimError::Config("steps must be >= 1".into()));
        }
        if let Some(ids) = &self.streams {
            if ids.len() != self.n_particles {
                return Err(SimError::Config(
                    "one stream index per particle is required".into(),
                ));
            }
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(SimError::Config("stream indices must be distinct".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn stream_of(&self, slot: usize) -> u64 {
        self.streams.as_ref().map_or(slot as u64, |ids| ids[slot])
    }

    /// Slots in increasing stream order; empirical averages are summed in
    /// this order so that they do not depend on slot labelling.
    pub(crate) fn summation_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_particles).collect();
        if let Some(ids) = &self.streams {
            order.sort_by_key(|&i| ids[i]);
        }
        order
    }
}

/// How a run chooses actions.
#[derive(Debug, Clone, Copy)]
pub enum ControlInput<'a, S: Scalar> {
    Feedback(&'a FeedbackPolicy<S>),
    /// One relaxed control per particle.
    Relaxed(&'a [RelaxedControl<S>]),
    /// The same relaxed control for every particle.
    Shared(&'a RelaxedControl<S>),
}

impl<'a, S: Scalar> From<&'a FeedbackPolicy<S>> for ControlInput<'a, S> {
    fn from(p: &'a FeedbackPolicy<S>) -> Self {
        ControlInput::Feedback(p)
    }
}

impl<'a, S: Scalar> From<&'a RelaxedControl<S>> for ControlInput<'a, S> {
    fn from(q: &'a RelaxedControl<S>) -> Self {
        ControlInput::Shared(q)
    }
}

impl<'a, S: Scalar> From<&'a [RelaxedControl<S>]> for ControlInput<'a, S> {
    fn from(q: &'a [RelaxedControl<S>]) -> Self {
        ControlInput::Relaxed(q)
    }
}

impl<'a, S: Scalar> From<&'a Vec<RelaxedControl<S>>> for ControlInput<'a, S> {
    fn from(q: &'a Vec<RelaxedControl<S>>) -> Self {
        ControlInput::Relaxed(q)
    }
}

/// Actions applied along a run, one relaxed action per particle and step.
#[derive(Debug, Clone, PartialEq)]
pub enum AppliedControls<S: Scalar> {
    /// Dirac actions, laid out `n × steps × dim_action`.
    Strict { dim_action: usize, actions: Vec<S> },
    /// Relaxed controls (one shared, or one per particle) and the interval
    /// each simulation step falls into.
    Relaxed {
        controls: Arc<Vec<RelaxedControl<S>>>,
        step_interval: Arc<Vec<usize>>,
    },
}

impl<S: Scalar> AppliedControls<S> {
    /// Calls `f(action, weight)` for every atom applied to `particle` on
    /// step `step`.
    pub fn visit(&self, particle: usize, step: usize, steps: usize, mut f: impl FnMut(&[S], S)) {
        match self {
            AppliedControls::Strict {
                dim_action,
                actions,
            } => {
                let o = (particle * steps + step) * dim_action;
                f(&actions[o..o + dim_action], S::one());
            }
            AppliedControls::Relaxed {
                controls,
                step_interval,
            } => {
                let c = if controls.len() == 1 {
                    &controls[0]
                } else {
                    &controls[particle]
                };
                for a in c.atoms(step_interval[step]) {
                    f(&a.action, a.weight);
                }
            }
        }
    }

    /// Atoms applied to `particle` on `step`.
    pub fn atoms(&self, particle: usize, step: usize, steps: usize) -> Vec<Atom<S>> {
        let mut out = Vec::new();
        self.visit(particle, step, steps, |a, w| {
            out.push(Atom::new(a.to_vec(), w))
        });
        out
    }
}

/// Which measure the coefficients saw during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureConvention {
    /// The live empirical measure of the particles.
    Empirical,
    /// A frozen external flow.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps_completed: usize,
    pub max_abs: f64,
    pub nan_flag: bool,
    /// `(step, particle)` of the first state past the blow-up threshold.
    pub blowup: Option<(usize, usize)>,
}

/// Trajectories, applied controls and realized rewards of one run.
#[derive(Debug, Clone)]
pub struct SimOutput<S: Scalar> {
    pub paths: PathEnsemble<S>,
    pub controls: AppliedControls<S>,
    /// Per-particle `sum_k dt f + g` under the run's own measure argument;
    /// NaN after a blow-up.
    pub reward_samples: Vec<S>,
    pub diagnostics: Diagnostics,
    pub convention: MeasureConvention,
    pub seed: u64,
}

impl<S: Scalar> SimOutput<S> {
    pub fn n(&self) -> usize {
        self.paths.len()
    }

    pub fn steps(&self) -> usize {
        self.paths.steps()
    }

    pub fn blew_up(&self) -> bool {
        self.diagnostics.nan_flag
    }

    /// `Err(NumericalBlowup)` if the run was cut short.
    pub fn into_result(self) -> Result<Self, SimError> {
        match self.diagnostics.blowup {
            Some((step, particle)) => Err(SimError::NumericalBlowup { step, particle }),
            None => Ok(self),
        }
    }

    /// CSV with one row per particle: terminal state and realized reward.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.paths.dim();
        write!(w, "particle")?;
        for j in 0..d {
            write!(w, ",x{j}_T")?;
        }
        writeln!(w, ",reward")?;
        for i in 0..self.n() {
            write!(w, "{i}")?;
            for v in self.paths.state(i, self.steps()) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", self.reward_samples[i])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
