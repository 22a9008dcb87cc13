//! Control problems: coefficients, exponents, action sets and initial laws,
//! plus sampled checks of the growth, coercivity and Lipschitz conditions
//! the limit theory relies on.

mod action;
mod builtin;
mod validate;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::EmpiricalLaw;
use crate::rng::{CounterRng, Purpose};
use crate::{pow_abs, Scalar};

pub(crate) use action::unit_vector;
pub use action::{ActionKind, ActionSet};
pub use builtin::{builtin_model, Builtin, LqParams, BUILTIN_NAMES};
pub use validate::{validate_growth, validate_lipschitz, CheckResult, ProbePlan, ValidationReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("exponents violate p' > p >= max(1, p_sigma), p' >= 2 >= p_sigma >= 0: {0}")]
    InvalidExponents(String),
    #[error("invalid action set: {0}")]
    InvalidActionSet(String),
    #[error("unknown builtin model `{0}`")]
    UnknownModel(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("non-finite coefficient `{coefficient}` at t={t}, |x|={x_norm}")]
    NonFiniteCoefficient {
        coefficient: &'static str,
        t: f64,
        x_norm: f64,
    },
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Integrability exponents `(p, p', p_sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Exponents<S: Scalar> {
    pub p: S,
    pub p_prime: S,
    pub p_sigma: S,
}

impl<S: Scalar> Exponents<S> {
    pub fn new(p: S, p_prime: S, p_sigma: S) -> Result<Self, ModelError> {
        let e = Self {
            p,
            p_prime,
            p_sigma,
        };
        e.check()?;
        Ok(e)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let two = S::lit(2.0);
        let ok = self.p_prime > self.p
            && self.p >= S::one().max(self.p_sigma)
            && self.p_prime >= two
            && two >= self.p_sigma
            && self.p_sigma >= S::zero();
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidExponents(format!(
                "p={}, p'={}, p_sigma={}",
                self.p, self.p_prime, self.p_sigma
            )))
        }
    }
}

/// Summary of the measure argument handed to coefficients.
///
/// Holds the mean and the `p`-th absolute moment of the measure, and
/// optionally the sample cloud itself for models that interact through
/// more than moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureView<S: Scalar> {
    pub mean: Vec<S>,
    pub p_moment: S,
    pub samples: Option<Arc<EmpiricalLaw<S>>>,
}

impl<S: Scalar> MeasureView<S> {
    pub fn new(mean: Vec<S>, p_moment: S) -> Self {
        Self {
            mean,
            p_moment,
            samples: None,
        }
    }

    /// View of the Dirac mass at `z`.
    pub fn dirac(z: &[S], p: S) -> Self {
        let r = crate::norm(z);
        Self::new(z.to_vec(), pow_abs(r, p))
    }

    /// View of an empirical law; `keep_samples` retains the cloud.
    pub fn from_law(law: &EmpiricalLaw<S>, p: S, keep_samples: bool) -> Self {
        Self {
            mean: law.mean(),
            p_moment: law.moment(p),
            samples: keep_samples.then(|| Arc::new(law.clone())),
        }
    }

    /// View of the uniform measure over the `n` points stored contiguously
    /// in `states` (n × d).
    pub fn from_states(states: &[S], dim: usize, p: S) -> Self {
        let n = states.len() / dim;
        let inv_n = S::one() / S::from_usize_lossy(n);
        let mut mean = vec![S::zero(); dim];
        let mut mom = S::zero();
        for x in states.chunks_exact(dim) {
            for (m, &v) in mean.iter_mut().zip(x) {
                *m = *m + v;
            }
            mom = mom + pow_abs(crate::norm(x), p);
        }
        for m in &mut mean {
            *m = *m * inv_n;
        }
        Self::new(mean, mom * inv_n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks the view against its own samples, when present.
    pub fn check(&self, p: S) -> Result<(), ModelError> {
        if !(self.p_moment >= S::zero()) || self.mean.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid(
                "measure view has invalid statistics".into(),
            ));
        }
        if let Some(law) = &self.samples {
            let tol = S::lit(1e-12).max(S::epsilon() * S::lit(64.0));
            let rel = |a: S, b: S| (a - b).abs() <= tol * S::one().max(a.abs().max(b.abs()));
            let mean = law.mean();
            if !mean.iter().zip(&self.mean).all(|(&a, &b)| rel(a, b))
                || !rel(law.moment(p), self.p_moment)
            {
                return Err(ModelError::Invalid(
                    "measure view statistics disagree with its samples".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The coefficient quadruple `(b, sigma, f, g)`.
///
/// Implementations must be pure: equal inputs produce bitwise-equal outputs.
pub trait Coefficients<S: Scalar>: Send + Sync {
    /// Writes `b(t, x, m, a)` (length `d`) into `out`.
    fn drift(&self, t: S, x: &[S], m: &MeasureView<S>, a: &[S], out: &mut [S]);
    /// Writes `sigma(t, x, m, a)` as a row-major `d × d_W` matrix into `out`.
    fn volatility(&self, t: S, x: &[S], m: &MeasureView<S>, a: &[S], out: &mut [S]);
    fn running_reward(&self, t: S, x: &[S], m: &MeasureView<S>, a: &[S]) -> S;
    fn terminal_reward(&self, x: &[S], m: &MeasureView<S>) -> S;
    /// Whether coefficients read [`MeasureView::samples`]. Engines only
    /// materialise sample clouds when this is true.
    fn uses_samples(&self) -> bool {
        false
    }
}

type DriftFn<S> = dyn Fn(S, &[S], &MeasureView<S>, &[S], &mut [S]) + Send + Sync;
type RewardFn<S> = dyn Fn(S, &[S], &MeasureView<S>, &[S]) -> S + Send + Sync;
type TerminalFn<S> = dyn Fn(&[S], &MeasureView<S>) -> S + Send + Sync;

/// Closure-backed coefficients for user models registered through the API.
pub struct FnCoefficients<S: Scalar> {
    drift: Box<DriftFn<S>>,
    volatility: Box<DriftFn<S>>,
    running: Box<RewardFn<S>>,
    terminal: Box<TerminalFn<S>>,
    uses_samples: bool,
}

impl<S: Scalar> FnCoefficients<S> {
    pub fn new(
        drift: impl Fn(S, &[S], &MeasureView<S>, &[S], &mut [S]) + Send + Sync + 'static,
        volatility: impl Fn(S, &[S], &MeasureView<S>, &[S], &mut [S]) + Send + Sync + 'static,
        running: impl Fn(S, &[S], &MeasureView<S>, &[S]) -> S + Send + Sync + 'static,
        terminal: impl Fn(&[S], &MeasureView<S>) -> S + Send + Sync + 'static,
    ) -> Self {
        Self {
            drift: Box::new(drift),
            volatility: Box::new(volatility),
            running: Box::new(running),
            terminal: Box::new(terminal),
            uses_samples: false,
        }
    }

    pub fn with_samples(mut self) -> Self {
        self.uses_samples = true;
        self
    }
}

impl<S: Scalar> Coefficients<S> for FnCoefficients<S> {
    fn drift(&self, t: S, x: &[S], m: &MeasureView<S>, a: &[S], out: &mut [S]) {
        (self.drift)(t, x, m, a, out)
    }
    fn volatility(&self, t: S, x: &[S], m: &MeasureView<S>, a: &[S], out: &mut [S]) {
        (self.volatility)(t, x, m, a, out)
    }
    fn running_reward(&self, t: S, x: &[S], m: &MeasureView<S>, a: &[S]) -> S {
        (self.running)(t, x, m, a)
    }
    fn terminal_reward(&self, x: &[S], m: &MeasureView<S>) -> S {
        (self.terminal)(x, m)
    }
    fn uses_samples(&self) -> bool {
        self.uses_samples
    }
}

/// Initial law `lambda`, sampled deterministically from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound = "")]
pub enum InitialLaw<S: Scalar> {
    Dirac {
        point: Vec<S>,
    },
    /// Independent coordinates `N(mean_i, std_i^2)`.
    Gaussian {
        mean: Vec<S>,
        std: Vec<S>,
    },
    Uniform {
        lower: Vec<S>,
        upper: Vec<S>,
    },
}

impl<S: Scalar> InitialLaw<S> {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Dirac { point } => point.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Uniform { lower, .. } => lower.len(),
        }
    }

    fn check(&self) -> Result<(), ModelError> {
        let bad = match self {
            InitialLaw::Dirac { point } => point.iter().any(|v| !v.is_finite()),
            InitialLaw::Gaussian { mean, std } => {
                mean.len() != std.len()
                    || mean.iter().any(|v| !v.is_finite())
                    || std.iter().any(|v| !(v.is_finite() && *v >= S::zero()))
            }
            InitialLaw::Uniform { lower, upper } => {
                lower.len() != upper.len()
                    || lower
                        .iter()
                        .zip(upper)
                        .any(|(l, u)| !(l <= u && u.is_finite() && l.is_finite()))
            }
        };
        if bad || self.dim() == 0 {
            Err(ModelError::Invalid("malformed initial law".into()))
        } else {
            Ok(())
        }
    }

    /// Initial state of `particle` under `seed`.
    pub fn sample_into(&self, rng: &CounterRng, particle: u64, out: &mut [S]) {
        match self {
            InitialLaw::Dirac { point } => out.copy_from_slice(point),
            InitialLaw::Gaussian { mean, std } => {
                let mut z = vec![0.0; mean.len()];
                rng.stream(Purpose::InitialState, particle)
                    .fill_normals(&mut z);
                for ((o, (&m, &s)), zi) in out.iter_mut().zip(mean.iter().zip(std)).zip(z) {
                    *o = m + s * S::lit(zi);
                }
            }
            InitialLaw::Uniform { lower, upper } => {
                let mut s = rng.stream(Purpose::InitialState, particle);
                for (o, (&l, &u)) in out.iter_mut().zip(lower.iter().zip(upper)) {
                    *o = l + (u - l) * S::lit(s.uniform());
                }
            }
        }
    }

    pub fn mean(&self) -> Vec<S> {
        match self {
            InitialLaw::Dirac { point } => point.clone(),
            InitialLaw::Gaussian { mean, .. } => mean.clone(),
            InitialLaw::Uniform { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(&l, &u)| (l + u) / S::lit(2.0))
                .collect(),
        }
    }

    /// Per-coordinate variances.
    pub fn variance(&self) -> Vec<S> {
        match self {
            InitialLaw::Dirac { point } => vec![S::zero(); point.len()],
            InitialLaw::Gaussian { std, .. } => std.iter().map(|&s| s * s).collect(),
            InitialLaw::Uniform { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(&l, &u)| (u - l) * (u - l) / S::lit(12.0))
                .collect(),
        }
    }

    /// Flips the sign of the law's location; used by symmetry checks.
    pub fn negated(&self) -> Self {
        let neg = |v: &Vec<S>| v.iter().map(|&x| -x).collect::<Vec<_>>();
        match self {
            InitialLaw::Dirac { point } => InitialLaw::Dirac { point: neg(point) },
            InitialLaw::Gaussian { mean, std } => InitialLaw::Gaussian {
                mean: neg(mean),
                std: std.clone(),
            },
            InitialLaw::Uniform { lower, upper } => InitialLaw::Uniform {
                lower: neg(upper),
                upper: neg(lower),
            },
        }
    }
}

/// A complete control problem. Immutable once built and cheap to clone.
#[derive(Clone)]
pub struct ModelSpec<S: Scalar> {
    pub name: String,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub horizon: S,
    pub action_set: ActionSet<S>,
    pub exponents: Exponents<S>,
    pub coefficients: Arc<dyn Coefficients<S>>,
    pub initial_law: InitialLaw<S>,
    /// Parameters of the builtin this model was built from, if any.
    pub builtin: Option<Builtin<S>>,
}

impl<S: Scalar> fmt::Debug for ModelSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("horizon", &self.horizon)
            .field("action_set", &self.action_set)
            .field("exponents", &self.exponents)
            .field("initial_law", &self.initial_law)
            .field("builtin", &self.builtin)
            .finish()
    }
}

impl<S: Scalar> ModelSpec<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        dim_state: usize,
        dim_noise: usize,
        horizon: S,
        action_set: ActionSet<S>,
        exponents: Exponents<S>,
        coefficients: Arc<dyn Coefficients<S>>,
        initial_law: InitialLaw<S>,
    ) -> Result<Self, ModelError> {
        exponents.check()?;
        if dim_state == 0 || dim_noise == 0 {
            return Err(ModelError::Invalid(
                "state and noise dimensions must be positive".into(),
            ));
        }
        if !(horizon > S::zero() && horizon.is_finite()) {
            return Err(ModelError::Invalid(
                "horizon must be positive and finite".into(),
            ));
        }
        initial_law.check()?;
        if initial_law.dim() != dim_state {
            return Err(ModelError::Invalid(
                "initial law dimension differs from state dimension".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            dim_state,
            dim_noise,
            horizon,
            action_set,
            exponents,
            coefficients,
            initial_law,
            builtin: None,
        })
    }

    pub fn with_initial_law(&self, law: InitialLaw<S>) -> Result<Self, ModelError> {
        law.check()?;
        if law.dim() != self.dim_state {
            return Err(ModelError::Invalid(
                "initial law dimension differs from state dimension".into(),
            ));
        }
        let mut m = self.clone();
        m.initial_law = law;
        Ok(m)
    }

    pub fn with_horizon(&self, horizon: S) -> Result<Self, ModelError> {
        if !(horizon > S::zero() && horizon.is_finite()) {
            return Err(ModelError::Invalid(
                "horizon must be positive and finite".into(),
            ));
        }
        let mut m = self.clone();
        m.horizon = horizon;
        Ok(m)
    }

    pub fn drift_vec(&self, t: S, x: &[S], m: &MeasureView<S>, a: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.dim_state];
        self.coefficients.drift(t, x, m, a, &mut out);
        out
    }

    pub fn volatility_vec(&self, t: S, x: &[S], m: &MeasureView<S>, a: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.dim_state * self.dim_noise];
        self.coefficients.volatility(t, x, m, a, &mut out);
        out
    }

    pub fn running_reward(&self, t: S, x: &[S], m: &MeasureView<S>, a: &[S]) -> S {
        self.coefficients.running_reward(t, x, m, a)
    }

    pub fn terminal_reward(&self, x: &[S], m: &MeasureView<S>) -> S {
        self.coefficients.terminal_reward(x, m)
    }

    pub fn uses_samples(&self) -> bool {
        self.coefficients.uses_samples()
    }

    /// `p`-moment view of the uniform measure over `states` (n × d),
    /// materialising samples only when the coefficients ask for them.
    pub fn empirical_view(&self, states: &[S]) -> MeasureView<S> {
        if self.uses_samples() {
            let law = EmpiricalLaw::new(states.to_vec(), self.dim_state)
                .expect("engine states form a valid law");
            MeasureView::from_law(&law, self.exponents.p, true)
        } else {
            MeasureView::from_states(states, self.dim_state, self.exponents.p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_constraints() {
        assert!(Exponents::new(1.0, 2.0, 0.0).is_ok());
        assert!(Exponents::new(1.5, 3.0, 1.5).is_ok());
        // p' must exceed p
        assert!(Exponents::new(2.0, 2.0, 0.0).is_err());
        // p' >= 2
        assert!(Exponents::new(1.0, 1.5, 0.0).is_err());
        // p >= p_sigma
        assert!(Exponents::new(1.0, 2.5, 1.5).is_err());
        // p_sigma <= 2
        assert!(Exponents::new(2.5, 3.0, 2.5).is_err());
        assert!(Exponents::new(1.0, 2.0, -0.5).is_err());
    }

    #[test]
    fn view_from_states_matches_law() {
        let pts: Vec<f64> = vec![0.0, 2.0, -1.0, 3.0];
        let law = EmpiricalLaw::new(pts.clone(), 1).unwrap();
        let a = MeasureView::from_states(&pts, 1, 1.5);
        let b = MeasureView::from_law(&law, 1.5, true);
        assert_eq!(a.mean, b.mean);
        assert!((a.p_moment - b.p_moment).abs() < 1e-14);
        assert!(b.check(1.5).is_ok());
        let mut bad = b.clone();
        bad.mean[0] += 1e-6;
        assert!(bad.check(1.5).is_err());
    }

    #[test]
    fn initial_law_sampling_is_seeded() {
        let law = InitialLaw::Gaussian {
            mean: vec![1.0],
            std: vec![2.0],
        };
        let mut a = [0.0];
        let mut b = [0.0];
        law.sample_into(&CounterRng::new(5), 9, &mut a);
        law.sample_into(&CounterRng::new(5), 9, &mut b);
        assert_eq!(a, b);
        law.sample_into(&CounterRng::new(6), 9, &mut b);
        assert_ne!(a, b);
    }
}
