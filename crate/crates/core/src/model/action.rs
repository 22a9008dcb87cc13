use serde::{Deserialize, Serialize};

use crate::rng::Stream;
use crate::{norm, Scalar};

use super::ModelError;

/// Shape of an action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound = "")]
pub enum ActionKind<S: Scalar> {
    Box { lower: Vec<S>, upper: Vec<S> },
    Finite { points: Vec<Vec<S>> },
    Ball { radius: S },
}

/// Closed action set `A` in a Euclidean space of dimension `dim_action`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ActionSet<S: Scalar> {
    kind: ActionKind<S>,
    dim_action: usize,
}

impl<S: Scalar> ActionSet<S> {
    pub fn boxed(lower: Vec<S>, upper: Vec<S>) -> Result<Self, ModelError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(ModelError::InvalidActionSet(
                "box bounds must be non-empty and of equal length".into(),
            ));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(ModelError::InvalidActionSet(
                "box requires lower <= upper componentwise".into(),
            ));
        }
        let dim_action = lower.len();
        Ok(Self {
            kind: ActionKind::Box { lower, upper },
            dim_action,
        })
    }

    pub fn interval(lower: S, upper: S) -> Result<Self, ModelError> {
        Self::boxed(vec![lower], vec![upper])
    }

    pub fn finite(points: Vec<Vec<S>>) -> Result<Self, ModelError> {
        let dim_action = points.first().map(Vec::len).unwrap_or(0);
        if dim_action == 0 || points.iter().any(|p| p.len() != dim_action) {
            return Err(ModelError::InvalidActionSet(
                "finite set needs at least one point and a common dimension".into(),
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidActionSet(
                "non-finite action point".into(),
            ));
        }
        Ok(Self {
            kind: ActionKind::Finite { points },
            dim_action,
        })
    }

    pub fn ball(radius: S, dim_action: usize) -> Result<Self, ModelError> {
        if dim_action == 0 || !(radius >= S::zero()) {
            return Err(ModelError::InvalidActionSet(
                "ball needs positive dimension and radius >= 0".into(),
            ));
        }
        Ok(Self {
            kind: ActionKind::Ball { radius },
            dim_action,
        })
    }

    pub fn kind(&self) -> &ActionKind<S> {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim_action
    }

    pub fn is_bounded(&self) -> bool {
        match &self.kind {
            ActionKind::Box { lower, upper } => lower.iter().chain(upper).all(|v| v.is_finite()),
            ActionKind::Finite { .. } => true,
            ActionKind::Ball { radius } => radius.is_finite(),
        }
    }

    pub fn is_finite_set(&self) -> bool {
        matches!(self.kind, ActionKind::Finite { .. })
    }

    pub fn contains(&self, a: &[S]) -> bool {
        if a.len() != self.dim_action {
            return false;
        }
        let tol = S::lit(1e-12);
        match &self.kind {
            ActionKind::Box { lower, upper } => a
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(&v, (&l, &u))| v >= l - tol && v <= u + tol),
            ActionKind::Finite { points } => points
                .iter()
                .any(|p| p.iter().zip(a).all(|(&x, &y)| (x - y).abs() <= tol)),
            ActionKind::Ball { radius } => norm(a) <= *radius + tol,
        }
    }

    /// Maps an arbitrary vector to a point of the set: clamp for boxes,
    /// nearest atom for finite sets (first wins on ties), radial projection
    /// for balls.
    pub fn project(&self, a: &[S]) -> Vec<S> {
        match &self.kind {
            ActionKind::Box { lower, upper } => a
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(&v, (&l, &u))| {
                    if v.is_nan() {
                        l.max(S::zero()).min(u)
                    } else {
                        v.max(l).min(u)
                    }
                })
                .collect(),
            ActionKind::Finite { points } => {
                let mut best = 0;
                let mut best_d = S::infinity();
                for (i, p) in points.iter().enumerate() {
                    let d = crate::dist(p, a);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                points[best].clone()
            }
            ActionKind::Ball { radius } => {
                let n = norm(a);
                if n <= *radius {
                    a.to_vec()
                } else {
                    a.iter().map(|&v| v * *radius / n).collect()
                }
            }
        }
    }

    /// Random point of the set used by assumption probes; unbounded
    /// directions are sampled at the given scale.
    pub fn sample(&self, stream: &mut Stream, scale: S) -> Vec<S> {
        match &self.kind {
            ActionKind::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(&l, &u)| {
                    let lo = if l.is_finite() { l } else { -scale };
                    let hi = if u.is_finite() { u } else { scale };
                    lo + (hi - lo) * S::lit(stream.uniform())
                })
                .collect(),
            ActionKind::Finite { points } => points[stream.below(points.len())].clone(),
            ActionKind::Ball { radius } => {
                let r = if radius.is_finite() {
                    radius.min(scale)
                } else {
                    scale
                };
                let dir = unit_vector::<S>(stream, self.dim_action);
                let rho = r * S::lit(stream.uniform())
                    .powf(S::one() / S::from_usize_lossy(self.dim_action));
                dir.into_iter().map(|v| v * rho).collect()
            }
        }
    }

    /// Finite enumeration of the set's atoms, when it has one.
    pub fn atoms(&self) -> Option<&[Vec<S>]> {
        match &self.kind {
            ActionKind::Finite { points } => Some(points),
            _ => None,
        }
    }
}

/// Uniformly distributed unit vector.
pub(crate) fn unit_vector<S: Scalar>(stream: &mut Stream, dim: usize) -> Vec<S> {
    loop {
        let mut z = vec![0.0; dim];
        stream.fill_normals(&mut z);
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return z.into_iter().map(|v| S::lit(v / n)).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{CounterRng, Purpose};

    #[test]
    fn box_rejects_inverted_bounds() {
        assert!(ActionSet::<f64>::boxed(vec![1.0], vec![0.0]).is_err());
        assert!(ActionSet::<f64>::boxed(vec![], vec![]).is_err());
    }

    #[test]
    fn projection_lands_in_set() {
        let b = ActionSet::<f64>::boxed(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(b.project(&[5.0, -3.0]), vec![1.0, 0.0]);
        let f = ActionSet::<f64>::finite(vec![vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(f.project(&[0.3]), vec![1.0]);
        assert_eq!(f.project(&[-0.3]), vec![-1.0]);
        let ball = ActionSet::<f64>::ball(1.0, 2).unwrap();
        let p = ball.project(&[3.0, 4.0]);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn samples_are_members() {
        let mut s = CounterRng::new(0).stream(Purpose::Probe, 0);
        let sets = [
            ActionSet::<f64>::boxed(vec![-2.0], vec![3.0]).unwrap(),
            ActionSet::<f64>::finite(vec![vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap(),
            ActionSet::<f64>::ball(1.5, 3).unwrap(),
        ];
        for set in &sets {
            for _ in 0..200 {
                let a = set.sample(&mut s, 10.0);
                assert!(set.contains(&a), "{a:?} not in {set:?}");
            }
        }
    }
}
