//! Mean-field control toolkit.
//!
//! Simulates controlled McKean-Vlasov dynamics and their `n`-particle
//! approximations, evaluates mean-field and `n`-state objectives, searches
//! feedback policies, and checks the limit behaviour of near-optimal
//! particle systems against closed-form references.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the precision to `f64`, which is
//! what the experiment harness and the CLI use.

pub mod control;
pub mod experiment;
pub mod measure;
pub mod model;
pub mod objective;
pub mod optimize;
pub mod rng;
mod scalar;
pub mod sim;

pub use scalar::{dist, norm, pow_abs, Scalar};

pub type ModelSpec = model::ModelSpec<f64>;
pub type ActionSet = model::ActionSet<f64>;
pub type MeasureView = model::MeasureView<f64>;
pub type EmpiricalLaw = measure::EmpiricalLaw<f64>;
pub type PathEnsemble = measure::PathEnsemble<f64>;
pub type RelaxedControl = control::RelaxedControl<f64>;
pub type FeedbackPolicy = control::FeedbackPolicy<f64>;
pub type SimOutput = sim::SimOutput<f64>;
pub type MeasureFlow = sim::MeasureFlow<f64>;
pub type ObjectiveEstimate = objective::ObjectiveEstimate<f64>;
pub type OracleSolution = optimize::OracleSolution<f64>;
