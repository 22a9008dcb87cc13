use serde::{Deserialize, Serialize};

use super::ControlError;
use crate::model::ActionSet;
use crate::Scalar;

/// Shape of a feedback map `(t, x) -> a`; the numbers live in
/// [`FeedbackPolicy::theta`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
#[serde(bound = "")]
pub enum PolicyFamily<S: Scalar> {
    /// `theta = a0`.
    Constant,
    /// Piecewise constant in time on the intervals of `knots`; on interval
    /// `j` the action is `K_j x + k_j`. `theta` stacks, per interval, the
    /// row-major `K_j` (k × d) followed by `k_j`.
    Linear { knots: Vec<S> },
    /// Value at the nearest node of the tensor grid
    /// `t_nodes × x_nodes[0] × ... × x_nodes[d-1]`; `theta` holds one
    /// action per node, time index slowest.
    Table {
        t_nodes: Vec<S>,
        x_nodes: Vec<Vec<S>>,
    },
}

/// Markovian feedback policy. Evaluation always lands in the action set:
/// box sets clamp, finite sets snap to the nearest atom, balls project
/// radially.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FeedbackPolicy<S: Scalar> {
    family: PolicyFamily<S>,
    theta: Vec<S>,
    dim_state: usize,
    action_set: ActionSet<S>,
}

fn nearest<S: Scalar>(nodes: &[S], v: S) -> usize {
    let pos = nodes.partition_point(|&n| n < v);
    if pos == 0 {
        0
    } else if pos == nodes.len() {
        nodes.len() - 1
    } else if v - nodes[pos - 1] <= nodes[pos] - v {
        pos - 1
    } else {
        pos
    }
}

fn increasing<S: Scalar>(v: &[S]) -> bool {
    !v.is_empty() && v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[1] > w[0])
}

impl<S: Scalar> FeedbackPolicy<S> {
    pub fn new(
        family: PolicyFamily<S>,
        theta: Vec<S>,
        dim_state: usize,
        action_set: ActionSet<S>,
    ) -> Result<Self, ControlError> {
        let p = Self {
            family,
            theta,
            dim_state,
            action_set,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn constant(
        a0: Vec<S>,
        dim_state: usize,
        action_set: ActionSet<S>,
    ) -> Result<Self, ControlError> {
        Self::new(PolicyFamily::Constant, a0, dim_state, action_set)
    }

    /// Linear family on `knots` with all gains and offsets zero.
    pub fn linear_zero(
        knots: Vec<S>,
        dim_state: usize,
        action_set: ActionSet<S>,
    ) -> Result<Self, ControlError> {
        let family = PolicyFamily::Linear { knots };
        let n = Self::param_count(&family, dim_state, action_set.dim());
        Self::new(family, vec![S::zero(); n], dim_state, action_set)
    }

    /// Number of parameters a family needs for the given dimensions.
    pub fn param_count(family: &PolicyFamily<S>, dim_state: usize, dim_action: usize) -> usize {
        match family {
            PolicyFamily::Constant => dim_action,
            PolicyFamily::Linear { knots } => {
                knots.len().saturating_sub(1) * dim_action * (dim_state + 1)
            }
            PolicyFamily::Table { t_nodes, x_nodes } => {
                t_nodes.len() * x_nodes.iter().map(Vec::len).product::<usize>() * dim_action
            }
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        match &self.family {
            PolicyFamily::Constant => {}
            PolicyFamily::Linear { knots } => {
                if knots.len() < 2 || !increasing(knots) {
                    return Err(ControlError::BadPolicy(
                        "linear knots must be increasing with at least two points".into(),
                    ));
                }
            }
            PolicyFamily::Table { t_nodes, x_nodes } => {
                if x_nodes.len() != self.dim_state {
                    return Err(ControlError::Dimension(format!(
                        "table has {} state axes for a {}-dimensional state",
                        x_nodes.len(),
                        self.dim_state
                    )));
                }
                if !increasing(t_nodes) || !x_nodes.iter().all(|v| increasing(v)) {
                    return Err(ControlError::BadPolicy(
                        "table nodes must be increasing and non-empty".into(),
                    ));
                }
            }
        }
        let expected = Self::param_count(&self.family, self.dim_state, self.action_set.dim());
        if self.theta.len() != expected {
            return Err(ControlError::ParameterCount {
                expected,
                got: self.theta.len(),
            });
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(ControlError::BadPolicy("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> &PolicyFamily<S> {
        &self.family
    }

    pub fn theta(&self) -> &[S] {
        &self.theta
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn action_set(&self) -> &ActionSet<S> {
        &self.action_set
    }

    pub fn with_theta(&self, theta: Vec<S>) -> Result<Self, ControlError> {
        Self::new(
            self.family.clone(),
            theta,
            self.dim_state,
            self.action_set.clone(),
        )
    }

    pub fn evaluate(&self, t: S, x: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.action_set.dim()];
        self.evaluate_into(t, x, &mut out);
        out
    }

    pub fn evaluate_into(&self, t: S, x: &[S], out: &mut [S]) {
        let k = self.action_set.dim();
        match &self.family {
            PolicyFamily::Constant => out.copy_from_slice(&self.theta),
            PolicyFamily::Linear { knots } => {
                let intervals = knots.len() - 1;
                let j = knots[1..].partition_point(|&g| g <= t).min(intervals - 1);
                let d = self.dim_state;
                let block = &self.theta[j * k * (d + 1)..(j + 1) * k * (d + 1)];
                let (gain, offset) = block.split_at(k * d);
                for (r, o) in out.iter_mut().enumerate() {
                    let row = &gain[r * d..(r + 1) * d];
                    *o = row.iter().zip(x).map(|(&g, &xi)| g * xi).sum::<S>() + offset[r];
                }
            }
            PolicyFamily::Table { t_nodes, x_nodes } => {
                let mut idx = nearest(t_nodes, t);
                for (axis, nodes) in x_nodes.iter().enumerate() {
                    idx = idx * nodes.len() + nearest(nodes, x[axis]);
                }
                out.copy_from_slice(&self.theta[idx * k..(idx + 1) * k]);
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            // Non-finite states give non-finite linear actions; keep the
            // output in the set regardless.
            out.iter_mut()
                .for_each(|v| *v = if v.is_nan() { S::zero() } else { *v });
        }
        if !self.action_set.contains(out) {
            let p = self.action_set.project(out);
            out.copy_from_slice(&p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_clamps_to_box() {
        let set = ActionSet::interval(-1.0, 1.0).unwrap();
        let p: FeedbackPolicy<f64> = FeedbackPolicy::new(
            PolicyFamily::Linear {
                knots: vec![0.0, 0.5, 1.0],
            },
            vec![-2.0, 0.1, 1.0, 0.0],
            1,
            set,
        )
        .unwrap();
        assert!((p.evaluate(0.0, &[0.2])[0] - (-0.3)).abs() < 1e-15);
        assert_eq!(p.evaluate(0.2, &[5.0]), vec![-1.0]);
        assert_eq!(p.evaluate(0.7, &[0.5]), vec![0.5]);
        assert_eq!(p.evaluate(1.0, &[3.0]), vec![1.0]);
    }

    #[test]
    fn table_snaps_to_finite_set() {
        let set = ActionSet::finite(vec![vec![-1.0], vec![1.0]]).unwrap();
        let p = FeedbackPolicy::new(
            PolicyFamily::Table {
                t_nodes: vec![0.0, 1.0],
                x_nodes: vec![vec![-1.0, 0.0, 1.0]],
            },
            vec![0.3, -0.2, 1.0, -5.0, 0.0, 0.9],
            1,
            set,
        )
        .unwrap();
        assert_eq!(p.evaluate(0.1, &[-0.9]), vec![1.0]);
        assert_eq!(p.evaluate(0.1, &[-0.2]), vec![-1.0]);
        assert_eq!(p.evaluate(0.9, &[-4.0]), vec![-1.0]);
        assert_eq!(p.evaluate(0.9, &[7.0]), vec![1.0]);
    }

    #[test]
    fn parameter_count_checked() {
        let set = ActionSet::interval(-1.0, 1.0).unwrap();
        assert!(matches!(
            FeedbackPolicy::constant(vec![0.0, 1.0], 1, set.clone()),
            Err(ControlError::ParameterCount {
                expected: 1,
                got: 2
            })
        ));
        let lin = FeedbackPolicy::linear_zero(vec![0.0, 0.25, 0.5, 1.0], 2, set).unwrap();
        assert_eq!(lin.theta().len(), 9);
        let s = serde_json::to_string(&lin).unwrap();
        let back: FeedbackPolicy<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, lin);
    }

    proptest! {
        #[test]
        fn evaluation_stays_in_set(
            t in -1.0f64..2.0,
            x in -1e6f64..1e6,
            theta in prop::collection::vec(-1e3f64..1e3, 4),
            which in 0usize..3,
        ) {
            let set = match which {
                0 => ActionSet::interval(-2.0, 0.5).unwrap(),
                1 => ActionSet::finite(vec![vec![-1.0], vec![0.25], vec![3.0]]).unwrap(),
                _ => ActionSet::ball(1.5, 1).unwrap(),
            };
            let p = FeedbackPolicy::new(PolicyFamily::Linear { knots: vec![0.0, 0.5, 1.0] }, theta, 1, set.clone()).unwrap();
            prop_assert!(set.contains(&p.evaluate(t, &[x])));
        }
    }
}
