//! Strict, relaxed and feedback controls, and the constructions that move
//! between them: truncation, chattering and the volatility reduction used to
//! simulate relaxed actions.

mod effective;
mod policy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{check_grid, grid_index, transport_cost, MeasureError};
use crate::model::{ActionKind, ActionSet};
use crate::{dist, norm, Scalar};

pub(crate) use effective::averaged_diffusion;
pub use effective::{effective_coefficients, psd_sqrt, symmetric_eigen};
pub use policy::{FeedbackPolicy, PolicyFamily};

#[derive(Debug, Error, Clone)]
pub enum ControlError {
    #[error("action {action:?} on interval {interval} is outside the action set")]
    ActionOutOfSet { interval: usize, action: Vec<f64> },
    #[error("control needs at least one interval")]
    Empty,
    #[error("expected {expected} intervals, got {got}")]
    IntervalCount { expected: usize, got: usize },
    #[error("interval {0}: weights must be nonnegative and sum to 1")]
    BadWeights(usize),
    #[error(
        "interval {interval}: a cycle of {cells} cells cannot host {atoms} atoms; refine further"
    )]
    RefinementTooCoarse {
        interval: usize,
        cells: usize,
        atoms: usize,
    },
    #[error("averaged diffusion matrix has eigenvalue {0} < -1e-10")]
    NotPsd(f64),
    #[error("policy expects {expected} parameters, got {got}")]
    ParameterCount { expected: usize, got: usize },
    #[error("invalid policy: {0}")]
    BadPolicy(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Weighted action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Atom<S: Scalar> {
    pub action: Vec<S>,
    pub weight: S,
}

impl<S: Scalar> Atom<S> {
    pub fn new(action: Vec<S>, weight: S) -> Self {
        Self { action, weight }
    }
}

/// Piecewise-constant relaxed control: on each interval of `time_grid` the
/// action is drawn from a finite probability vector of atoms.
///
/// The induced measure on `[0, T] × A` is `dt ⊗ q_t(da)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RelaxedControl<S: Scalar> {
    time_grid: Vec<S>,
    atoms: Vec<Vec<Atom<S>>>,
}

fn weights_ok<S: Scalar>(atoms: &[Atom<S>]) -> bool {
    let sum: S = atoms.iter().map(|a| a.weight).sum();
    !atoms.is_empty()
        && atoms.iter().all(|a| a.weight >= S::zero())
        && (sum - S::one()).abs() <= S::lit(1e-12).max(S::epsilon() * S::lit(64.0))
}

impl<S: Scalar> RelaxedControl<S> {
    pub fn new(
        time_grid: Vec<S>,
        atoms: Vec<Vec<Atom<S>>>,
        set: &ActionSet<S>,
    ) -> Result<Self, ControlError> {
        check_grid(&time_grid)?;
        if atoms.len() != time_grid.len() - 1 {
            return Err(ControlError::IntervalCount {
                expected: time_grid.len() - 1,
                got: atoms.len(),
            });
        }
        for (k, iv) in atoms.iter().enumerate() {
            if !weights_ok(iv) {
                return Err(ControlError::BadWeights(k));
            }
            if let Some(a) = iv.iter().find(|a| !set.contains(&a.action)) {
                return Err(ControlError::ActionOutOfSet {
                    interval: k,
                    action: a.action.iter().map(|v| v.as_f64()).collect(),
                });
            }
        }
        Ok(Self { time_grid, atoms })
    }

    /// Strict control playing `actions[k]` on interval `k`.
    pub fn strict_from_path(
        actions: &[Vec<S>],
        time_grid: Vec<S>,
        set: &ActionSet<S>,
    ) -> Result<Self, ControlError> {
        if actions.is_empty() {
            return Err(ControlError::Empty);
        }
        let atoms = actions
            .iter()
            .map(|a| vec![Atom::new(a.clone(), S::one())])
            .collect();
        Self::new(time_grid, atoms, set)
    }

    /// The same relaxed action on every interval.
    pub fn stationary(
        atoms: Vec<Atom<S>>,
        time_grid: Vec<S>,
        set: &ActionSet<S>,
    ) -> Result<Self, ControlError> {
        let k = time_grid.len().saturating_sub(1);
        Self::new(time_grid, vec![atoms; k], set)
    }

    pub fn time_grid(&self) -> &[S] {
        &self.time_grid
    }

    pub fn horizon(&self) -> S {
        *self.time_grid.last().expect("grid has points")
    }

    pub fn intervals(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self, interval: usize) -> &[Atom<S>] {
        &self.atoms[interval]
    }

    pub fn all_atoms(&self) -> &[Vec<Atom<S>>] {
        &self.atoms
    }

    pub fn dim_action(&self) -> usize {
        self.atoms[0][0].action.len()
    }

    pub fn is_strict(&self) -> bool {
        self.atoms.iter().all(|iv| iv.len() == 1)
    }

    /// Interval containing `t`, right-open except at the horizon.
    pub fn interval_at(&self, t: S) -> usize {
        let pos = self.time_grid[1..].partition_point(|&g| g <= t);
        pos.min(self.atoms.len() - 1)
    }

    /// Index map from the points of `grid` (all but the last) to control
    /// intervals. Every control breakpoint must lie on `grid` so that no
    /// simulation step straddles two intervals.
    pub fn interval_map(&self, grid: &[S]) -> Result<Vec<usize>, ControlError> {
        let horizon = *grid.last().ok_or(ControlError::Empty)?;
        let tol = S::lit(1e-9) * S::one().max(horizon.abs());
        if (self.horizon() - horizon).abs() > tol {
            return Err(MeasureError::GridMismatch(self.horizon().as_f64()).into());
        }
        if let Some(&t) = self
            .time_grid
            .iter()
            .find(|&&t| grid_index(grid, t).is_none())
        {
            return Err(MeasureError::GridMismatch(t.as_f64()).into());
        }
        let mut out = Vec::with_capacity(grid.len() - 1);
        let mut j = 0;
        for &t in &grid[..grid.len() - 1] {
            while j + 1 < self.atoms.len() && t >= self.time_grid[j + 1] - tol {
                j += 1;
            }
            out.push(j);
        }
        Ok(out)
    }

    /// Replaces every atom `a` by its truncation to the closed ball of the
    /// given radius: `a` itself inside the ball, the radial projection
    /// `radius·a/|a|` outside (re-projected onto `set` when that leaves a
    /// box not containing the origin). For finite sets the nearest atom of
    /// the set inside the ball is used, or the smallest one if none is.
    pub fn truncate(&self, radius: S, set: &ActionSet<S>) -> Self {
        let map = |a: &[S]| -> Vec<S> {
            let r = norm(a);
            if r <= radius {
                return a.to_vec();
            }
            match set.kind() {
                ActionKind::Finite { points } => {
                    let inside = points.iter().filter(|p| norm(p) <= radius);
                    let nearest =
                        inside.min_by(|p, q| dist(p, a).partial_cmp(&dist(q, a)).expect("finite"));
                    nearest
                        .or_else(|| {
                            points
                                .iter()
                                .min_by(|p, q| norm(p).partial_cmp(&norm(q)).expect("finite"))
                        })
                        .expect("finite set is non-empty")
                        .clone()
                }
                _ => {
                    let radial: Vec<S> = a.iter().map(|&v| v * radius / r).collect();
                    if set.contains(&radial) {
                        radial
                    } else {
                        set.project(&radial)
                    }
                }
            }
        };
        let atoms = self
            .atoms
            .iter()
            .map(|iv| {
                iv.iter()
                    .map(|at| Atom::new(map(&at.action), at.weight))
                    .collect()
            })
            .collect();
        Self {
            time_grid: self.time_grid.clone(),
            atoms,
        }
    }

    /// Strict approximation on the grid refined `refinement` times.
    ///
    /// Each interval is cut into `refinement` cells grouped in cycles of
    /// `L` cells. `L` is the smallest divisor of `refinement` for which
    /// every weight times `L` is an integer; if there is none, the smallest
    /// divisor of at least `max(sqrt(refinement), #atoms)`. Inside a cycle
    /// the atoms occupy consecutive cells in their stored order, the cell
    /// counts being the largest-remainder rounding of `L·w`.
    pub fn chatter(&self, refinement: usize) -> Result<Self, ControlError> {
        if refinement == 0 {
            return Err(ControlError::RefinementTooCoarse {
                interval: 0,
                cells: 0,
                atoms: 1,
            });
        }
        let r = refinement;
        let divisors: Vec<usize> = (1..=r).filter(|l| r % l == 0).collect();
        let mut grid = Vec::with_capacity(self.atoms.len() * r + 1);
        let mut atoms = Vec::with_capacity(self.atoms.len() * r);
        for (k, iv) in self.atoms.iter().enumerate() {
            let live: Vec<&Atom<S>> = iv.iter().filter(|a| a.weight > S::zero()).collect();
            let exact = |l: usize| {
                live.iter().all(|a| {
                    let x = a.weight * S::from_usize_lossy(l);
                    (x - x.round()).abs() < S::lit(1e-9)
                })
            };
            let floor_len = (r as f64).sqrt().ceil() as usize;
            let cycle = divisors
                .iter()
                .copied()
                .find(|&l| exact(l))
                .or_else(|| {
                    divisors
                        .iter()
                        .copied()
                        .find(|&l| l >= floor_len.max(live.len()))
                })
                .unwrap_or(r);
            let counts =
                largest_remainder(&live.iter().map(|a| a.weight).collect::<Vec<_>>(), cycle);
            if counts.iter().any(|&c| c == 0) {
                return Err(ControlError::RefinementTooCoarse {
                    interval: k,
                    cells: cycle,
                    atoms: live.len(),
                });
            }
            let (t0, t1) = (self.time_grid[k], self.time_grid[k + 1]);
            let h = (t1 - t0) / S::from_usize_lossy(r);
            for c in 0..r {
                grid.push(t0 + h * S::from_usize_lossy(c));
            }
            for _ in 0..r / cycle {
                for (a, &c) in live.iter().zip(&counts) {
                    for _ in 0..c {
                        atoms.push(vec![Atom::new(a.action.clone(), S::one())]);
                    }
                }
            }
        }
        grid.push(self.horizon());
        Ok(Self {
            time_grid: grid,
            atoms,
        })
    }

    /// Bounded-Lipschitz (Dudley) distance between the normalised
    /// occupation measures `dt ⊗ q_t(da) / T` on `[0, T] × A`, the test
    /// functions having sup norm and Lipschitz constant at most 1 for the
    /// metric `|t - t'| + |a - a'|`.
    ///
    /// Computed exactly as the transport cost under `min(d, 2)` after
    /// collapsing time onto the midpoints of the common refinement of
    /// both grids.
    pub fn bounded_lipschitz_distance(&self, other: &Self) -> Result<S, ControlError> {
        let horizon = self.horizon();
        let tol = S::lit(1e-9) * S::one().max(horizon.abs());
        if (other.horizon() - horizon).abs() > tol {
            return Err(MeasureError::GridMismatch(other.horizon().as_f64()).into());
        }
        let mut cuts: Vec<S> = self
            .time_grid
            .iter()
            .chain(&other.time_grid)
            .copied()
            .collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
        cuts.dedup_by(|a, b| (*a - *b).abs() <= tol);
        let support = |c: &Self| -> (Vec<(S, Vec<S>)>, Vec<S>) {
            let mut pts = Vec::new();
            let mut w = Vec::new();
            for win in cuts.windows(2) {
                let mid = (win[0] + win[1]) * S::lit(0.5);
                let len = (win[1] - win[0]) / horizon;
                for atom in c.atoms(c.interval_at(mid)) {
                    if atom.weight > S::zero() {
                        pts.push((mid, atom.action.clone()));
                        w.push(atom.weight * len);
                    }
                }
            }
            (pts, w)
        };
        let (pa, wa) = support(self);
        let (pb, wb) = support(other);
        let two = S::lit(2.0);
        let cost: Vec<S> = pa
            .iter()
            .flat_map(|(t, a)| {
                pb.iter()
                    .map(move |(s, b)| ((*t - *s).abs() + dist(a, b)).min(two))
            })
            .collect();
        Ok(transport_cost(&wa, &wb, &cost)?)
    }
}

/// Integer counts summing to `total` that round `w · total` by the
/// largest-remainder rule, ties going to the earlier entry.
pub fn largest_remainder<S: Scalar>(w: &[S], total: usize) -> Vec<usize> {
    let scaled: Vec<S> = w.iter().map(|&x| x * S::from_usize_lossy(total)).collect();
    let mut counts: Vec<usize> = scaled
        .iter()
        .map(|x| {
            // Snap values within rounding noise of an integer.
            let r = x.round();
            if (*x - r).abs() < S::lit(1e-9) {
                r
            } else {
                x.floor()
            }
            .to_usize()
            .unwrap_or(0)
        })
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = scaled[i] - S::from_usize_lossy(counts[i]);
        let rj = scaled[j] - S::from_usize_lossy(counts[j]);
        rj.partial_cmp(&ri).expect("finite weights").then(i.cmp(&j))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::uniform_grid;

    fn pm1() -> ActionSet<f64> {
        ActionSet::finite(vec![vec![-1.0], vec![1.0]]).unwrap()
    }

    #[test]
    fn strict_from_actions() {
        let set = pm1();
        let q =
            RelaxedControl::strict_from_path(&[vec![-1.0], vec![1.0]], uniform_grid(1.0, 2), &set)
                .unwrap();
        assert_eq!(q.atoms(0), &[Atom::new(vec![-1.0], 1.0)]);
        assert_eq!(q.atoms(1), &[Atom::new(vec![1.0], 1.0)]);
        assert!(q.is_strict());
        assert!(matches!(
            RelaxedControl::strict_from_path(&[], uniform_grid(1.0, 1), &set),
            Err(ControlError::Empty)
        ));
        assert!(matches!(
            RelaxedControl::strict_from_path(&[vec![0.0]], uniform_grid(1.0, 1), &set),
            Err(ControlError::ActionOutOfSet { .. })
        ));
        let box_set = ActionSet::interval(-2.0, 2.0).unwrap();
        let c =
            RelaxedControl::strict_from_path(&vec![vec![0.5]; 4], uniform_grid(2.0, 4), &box_set)
                .unwrap();
        assert!(c
            .all_atoms()
            .iter()
            .all(|iv| iv == &[Atom::new(vec![0.5], 1.0)]));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let set = pm1();
        let bad = vec![vec![Atom::new(vec![-1.0], 0.5), Atom::new(vec![1.0], 0.4)]];
        assert!(matches!(
            RelaxedControl::new(uniform_grid(1.0, 1), bad, &set),
            Err(ControlError::BadWeights(0))
        ));
    }

    #[test]
    fn truncation() {
        let set: ActionSet<f64> = ActionSet::ball(10.0, 2).unwrap();
        let q = RelaxedControl::strict_from_path(&[vec![3.0, 4.0]], uniform_grid(1.0, 1), &set)
            .unwrap();
        let t = q.truncate(1.0, &set);
        let a = &t.atoms(0)[0].action;
        assert!((a[0] - 0.6).abs() < 1e-15 && (a[1] - 0.8).abs() < 1e-15);
        assert_eq!(q.truncate(5.0, &set), q);
        assert_eq!(q.truncate(f64::INFINITY, &set), q);
        let fin = ActionSet::finite(vec![vec![0.0], vec![0.5], vec![3.0]]).unwrap();
        let q = RelaxedControl::strict_from_path(&[vec![3.0]], uniform_grid(1.0, 1), &fin).unwrap();
        assert_eq!(q.truncate(1.0, &fin).atoms(0)[0].action, vec![0.5]);
    }

    #[test]
    fn chatter_examples() {
        let set = pm1();
        let half = vec![Atom::new(vec![-1.0], 0.5), Atom::new(vec![1.0], 0.5)];
        let q = RelaxedControl::stationary(half, uniform_grid(1.0, 1), &set).unwrap();
        let c = q.chatter(2).unwrap();
        assert_eq!(c.time_grid(), &[0.0, 0.5, 1.0]);
        assert_eq!(c.atoms(0)[0].action, vec![-1.0]);
        assert_eq!(c.atoms(1)[0].action, vec![1.0]);
        assert!(matches!(
            q.chatter(1),
            Err(ControlError::RefinementTooCoarse { .. })
        ));

        let uneven = vec![Atom::new(vec![-1.0], 0.75), Atom::new(vec![1.0], 0.25)];
        let q = RelaxedControl::stationary(uneven, uniform_grid(1.0, 1), &set).unwrap();
        let c = q.chatter(4).unwrap();
        let acts: Vec<f64> = c.all_atoms().iter().map(|iv| iv[0].action[0]).collect();
        assert_eq!(acts, vec![-1.0, -1.0, -1.0, 1.0]);
        assert!(c.is_strict());
    }

    #[test]
    fn chatter_of_strict_is_regrid() {
        let set = pm1();
        let q =
            RelaxedControl::strict_from_path(&[vec![-1.0], vec![1.0]], uniform_grid(1.0, 2), &set)
                .unwrap();
        let c = q.chatter(3).unwrap();
        assert_eq!(c.intervals(), 6);
        let acts: Vec<f64> = c.all_atoms().iter().map(|iv| iv[0].action[0]).collect();
        assert_eq!(acts, vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
        assert_eq!(c.bounded_lipschitz_distance(&q).unwrap(), 0.0);
    }

    #[test]
    fn remainder_rounding() {
        assert_eq!(largest_remainder(&[0.75, 0.25], 4), vec![3, 1]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 4), vec![2, 1, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.9], 7), vec![1, 6]);
        let c = largest_remainder(&[0.2, 0.3, 0.5], 10);
        assert_eq!(c, vec![2, 3, 5]);
    }

    #[test]
    fn interval_lookup() {
        let set = pm1();
        let q =
            RelaxedControl::strict_from_path(&[vec![-1.0], vec![1.0]], uniform_grid(1.0, 2), &set)
                .unwrap();
        assert_eq!(q.interval_at(0.0), 0);
        assert_eq!(q.interval_at(0.5), 1);
        assert_eq!(q.interval_at(1.0), 1);
        assert_eq!(
            q.interval_map(&uniform_grid(1.0, 4)).unwrap(),
            vec![0, 0, 1, 1]
        );
        assert!(q.interval_map(&uniform_grid(1.0, 3)).is_err());
    }

    #[test]
    fn bl_distance_between_constant_actions() {
        let set: ActionSet<f64> = ActionSet::interval(-1.0, 1.0).unwrap();
        let a = RelaxedControl::strict_from_path(&[vec![0.0]], uniform_grid(1.0, 1), &set).unwrap();
        let b =
            RelaxedControl::strict_from_path(&[vec![0.25]], uniform_grid(1.0, 1), &set).unwrap();
        assert!((a.bounded_lipschitz_distance(&b).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(a.bounded_lipschitz_distance(&a).unwrap(), 0.0);
    }

    #[test]
    fn serde_round_trip() {
        let set = pm1();
        let q =
            RelaxedControl::strict_from_path(&[vec![-1.0], vec![1.0]], uniform_grid(1.0, 2), &set)
                .unwrap();
        let s = serde_json::to_string(&q).unwrap();
        let back: RelaxedControl<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, q);
    }
}
