use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::control::{FeedbackPolicy, PolicyFamily};
use crate::measure::uniform_grid;
use crate::model::{builtin_model, ModelSpec};
use crate::optimize::{Method, OptimizeConfig, Target};
use crate::rng::derive_seed;
use crate::sim::SimConfig;

/// Whole experiment description, parsed from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; the CLI `--seed` flag overrides it.
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    pub sim: SimSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub optimize: Option<OptimizeSection>,
    #[serde(default)]
    pub schedule: Option<ScheduleSection>,
    #[serde(default)]
    pub chatter: Option<ChatterSection>,
    #[serde(default)]
    pub validate: ValidateSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    pub steps: usize,
}

fn default_particles() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Constant,
    Linear,
    Table,
    /// The closed-form linear-quadratic optimum on the simulation grid.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default)]
    pub family: PolicyKind,
    /// Number of equal time intervals of the linear family.
    #[serde(default)]
    pub intervals: Option<usize>,
    /// Table nodes; `t_nodes` defaults to the midpoints of `intervals`
    /// equal intervals.
    #[serde(default)]
    pub t_nodes: Option<Vec<f64>>,
    #[serde(default)]
    pub x_nodes: Option<Vec<Vec<f64>>>,
    /// Initial parameters; zero when absent.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    pub method: Method,
    #[serde(default = "one")]
    pub eval_seeds: usize,
    #[serde(default = "one")]
    pub holdout_seeds: usize,
    #[serde(default = "default_penalty")]
    pub penalty_blowup: f64,
    #[serde(default = "default_target")]
    pub target: Target,
}

fn one() -> usize {
    1
}

fn default_penalty() -> f64 {
    -1e6
}

fn default_target() -> Target {
    Target::NSystem
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub n: Vec<usize>,
    pub seeds_per_n: usize,
    #[serde(default = "yes")]
    pub warm_start: bool,
    /// Atom cap for the exact transport distances.
    #[serde(default = "default_subsample")]
    pub subsample: usize,
    /// Grid index of the "mid-horizon" distance, as a fraction of `steps`.
    #[serde(default = "half")]
    pub mid_fraction: f64,
    /// Pieces of the correction family searched around the fixed policy
    /// in converse runs.
    #[serde(default = "default_pieces")]
    pub correction_pieces: usize,
    /// Reference ensemble size, as a multiple of the largest `n`, when no
    /// closed form exists.
    #[serde(default = "default_factor")]
    pub reference_factor: usize,
    #[serde(default = "default_ref_iter")]
    pub reference_max_iter: usize,
    #[serde(default = "default_ref_tol")]
    pub reference_tol: f64,
}

fn yes() -> bool {
    true
}

fn default_subsample() -> usize {
    512
}

fn half() -> f64 {
    0.5
}

fn default_pieces() -> usize {
    4
}

fn default_factor() -> usize {
    4
}

fn default_ref_iter() -> usize {
    30
}

fn default_ref_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatterSection {
    /// Atoms of the relaxed control, used on every interval.
    pub actions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Equal intervals of the relaxed control.
    pub intervals: usize,
    #[serde(default = "one")]
    pub min_exponent: usize,
    pub max_exponent: usize,
    #[serde(default = "one")]
    pub seeds: usize,
    /// Radius of an optional truncation applied before chattering.
    #[serde(default)]
    pub truncate: Option<f64>,
    /// Also search the strict policy family of `[policy]` and compare its
    /// best value with the relaxed one.
    #[serde(default)]
    pub optimize_strict: bool,
    /// Particles used by the strict search; `sim.n_particles` when absent.
    #[serde(default)]
    pub strict_particles: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    #[serde(default)]
    pub samples_per_radius: Option<usize>,
    #[serde(default)]
    pub pairs_per_level: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Shared artifact cache; `<out>/cache` when absent.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ExperimentError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.build_model()?;
        if self.sim.steps == 0 || self.sim.n_particles == 0 {
            return Err(ExperimentError::Config(
                "sim.steps and sim.n_particles must be >= 1".into(),
            ));
        }
        if let Some(s) = &self.schedule {
            if s.n.is_empty() || s.n.contains(&0) || s.n.windows(2).any(|w| w[1] <= w[0]) {
                return Err(ExperimentError::Config(
                    "schedule.n must be a nonempty increasing list of positive counts".into(),
                ));
            }
            if s.seeds_per_n == 0 || s.subsample == 0 {
                return Err(ExperimentError::Config(
                    "schedule.seeds_per_n and schedule.subsample must be >= 1".into(),
                ));
            }
            if !(0.0..=1.0).contains(&s.mid_fraction) {
                return Err(ExperimentError::Config(
                    "schedule.mid_fraction must lie in [0, 1]".into(),
                ));
            }
        }
        if let Some(c) = &self.chatter {
            if c.actions.len() != c.weights.len() || c.actions.is_empty() {
                return Err(ExperimentError::Config(
                    "chatter.actions and chatter.weights must have equal nonzero length".into(),
                ));
            }
            if c.intervals == 0 || c.min_exponent > c.max_exponent || c.seeds == 0 {
                return Err(ExperimentError::Config(
                    "chatter needs intervals >= 1, seeds >= 1 and min_exponent <= max_exponent"
                        .into(),
                ));
            }
        }
        if let Some(o) = &self.optimize {
            self.optimize_config(o, 0).validate()?;
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<ModelSpec<f64>, ExperimentError> {
        Ok(builtin_model(&self.model.name, &self.model.params)?)
    }

    pub fn sim_config(&self, n: usize, seed: u64) -> SimConfig {
        SimConfig::new(n, self.sim.steps, seed)
    }

    /// Optimizer settings with eval and hold-out seeds derived from `seed`.
    pub fn optimize_config(&self, o: &OptimizeSection, seed: u64) -> OptimizeConfig {
        OptimizeConfig {
            method: o.method.clone(),
            eval_seeds: (0..o.eval_seeds as u64)
                .map(|j| derive_seed(seed, 2 * j))
                .collect(),
            holdout_seeds: (0..o.holdout_seeds as u64)
                .map(|j| derive_seed(seed, 2 * j + 1))
                .collect(),
            penalty_blowup: o.penalty_blowup,
            search_seed: derive_seed(seed, u64::MAX),
        }
    }

    /// The configured policy; `oracle` needs an lq_meanfield model.
    pub fn build_policy(
        &self,
        model: &ModelSpec<f64>,
    ) -> Result<FeedbackPolicy<f64>, ExperimentError> {
        let p = &self.policy;
        let set = model.action_set.clone();
        let d = model.dim_state;
        let family = match p.family {
            PolicyKind::Oracle => {
                return Ok(crate::optimize::solve_lq_oracle(model, self.sim.steps)?.policy)
            }
            PolicyKind::Constant => PolicyFamily::Constant,
            PolicyKind::Linear => PolicyFamily::Linear {
                knots: uniform_grid(model.horizon, p.intervals.unwrap_or(1)),
            },
            PolicyKind::Table => {
                let t_nodes = match &p.t_nodes {
                    Some(t) => t.clone(),
                    None => {
                        let k = p.intervals.unwrap_or(1).max(1);
                        (0..k)
                            .map(|j| model.horizon * (j as f64 + 0.5) / k as f64)
                            .collect()
                    }
                };
                let x_nodes = p.x_nodes.clone().unwrap_or_else(|| vec![vec![0.0]; d]);
                PolicyFamily::Table { t_nodes, x_nodes }
            }
        };
        let count = FeedbackPolicy::<f64>::param_count(&family, d, set.dim());
        let theta = match &p.theta {
            Some(t) => t.clone(),
            None if p.family == PolicyKind::Constant => set.project(&vec![0.0; set.dim()]),
            None => vec![0.0; count],
        };
        Ok(FeedbackPolicy::new(family, theta, d, set)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
name = "ou_chaos"
[sim]
steps = 10
"#;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.sim.n_particles, 1000);
        assert_eq!(
            c.build_policy(&c.build_model().unwrap()).unwrap().theta(),
            &[0.0]
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\nbogus = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&bad),
            Err(ExperimentError::Config(_))
        ));
        let bad = MINIMAL.replace("steps = 10", "steps = 10\nthreads = 4");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn bad_schedule_is_rejected() {
        let bad = format!("{MINIMAL}\n[schedule]\nn = [100, 50]\nseeds_per_n = 2\n");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let c = ExperimentConfig::from_toml_str(&format!(
            "{MINIMAL}\n[optimize]\neval_seeds = 3\nholdout_seeds = 2\nmethod = {{ kind = \"nelder_mead\", iters = 3, simplex_scale = 0.1 }}\n"
        ))
        .unwrap();
        let o = c.optimize_config(c.optimize.as_ref().unwrap(), 9);
        let mut all: Vec<u64> = o
            .eval_seeds
            .iter()
            .chain(&o.holdout_seeds)
            .copied()
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 5);
    }
}
