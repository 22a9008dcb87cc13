use serde::{Deserialize, Serialize};

use super::{grid_index, same_grid, EmpiricalLaw, MeasureError, PathEnsemble};
use crate::measure::min_cost_assignment;
use crate::{dist, pow_abs, Scalar};

/// Largest problem the exact matching solver accepts by default.
pub const DEFAULT_EXACT_CAP: usize = 512;

fn check_p<S: Scalar>(p: S) -> Result<(), MeasureError> {
    if p >= S::one() && p.is_finite() {
        Ok(())
    } else {
        Err(MeasureError::BadExponent(p.as_f64()))
    }
}

fn root<S: Scalar>(cost: S, p: S) -> S {
    cost.max(S::zero()).powf(S::one() / p)
}

fn sorted_atoms<S: Scalar>(law: &EmpiricalLaw<S>) -> Vec<(S, S)> {
    let mut v: Vec<(S, S)> = law
        .points()
        .iter()
        .copied()
        .zip(law.weights().iter().copied())
        .collect();
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite atoms"));
    v
}

/// Exact `W_p` between two laws on the real line through the monotone
/// (quantile) coupling. Accepts arbitrary weights and sizes.
pub fn wasserstein_1d<S: Scalar>(
    mu: &EmpiricalLaw<S>,
    nu: &EmpiricalLaw<S>,
    p: S,
) -> Result<S, MeasureError> {
    check_p(p)?;
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(MeasureError::DimensionMismatch(mu.dim(), nu.dim()));
    }
    let a = sorted_atoms(mu);
    let b = sorted_atoms(nu);
    if mu.is_uniform() && nu.is_uniform() && a.len() == b.len() {
        let cost: S = a.iter().zip(&b).map(|(x, y)| pow_abs(x.0 - y.0, p)).sum();
        return Ok(root(cost / S::from_usize_lossy(a.len()), p));
    }
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = S::zero();
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        cost = cost + m * pow_abs(a[i].0 - b[j].0, p);
        ra = ra - m;
        rb = rb - m;
        if ra <= S::zero() {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= S::zero() {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    Ok(root(cost, p))
}

/// Exact `W_p` between equally sized uniform laws in any dimension, via
/// minimum-cost perfect matching on the `|x_i - y_j|^p` cost matrix.
pub fn wasserstein_exact<S: Scalar>(
    mu: &EmpiricalLaw<S>,
    nu: &EmpiricalLaw<S>,
    p: S,
) -> Result<S, MeasureError> {
    wasserstein_exact_capped(mu, nu, p, DEFAULT_EXACT_CAP)
}

pub fn wasserstein_exact_capped<S: Scalar>(
    mu: &EmpiricalLaw<S>,
    nu: &EmpiricalLaw<S>,
    p: S,
    cap: usize,
) -> Result<S, MeasureError> {
    check_p(p)?;
    if mu.dim() != nu.dim() {
        return Err(MeasureError::DimensionMismatch(mu.dim(), nu.dim()));
    }
    if mu.len() != nu.len() {
        return Err(MeasureError::SizeMismatch(mu.len(), nu.len()));
    }
    if !mu.is_uniform() || !nu.is_uniform() {
        return Err(MeasureError::NonUniformWeights);
    }
    let n = mu.len();
    if n > cap {
        return Err(MeasureError::CapExceeded { n, cap });
    }
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        let x = mu.point(i);
        cost.extend((0..n).map(|j| pow_abs(dist(x, nu.point(j)), p)));
    }
    let a = min_cost_assignment(&cost, n);
    Ok(root(a.cost / S::from_usize_lossy(n), p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropicOptions {
    /// Target regularisation, in units of the cost matrix.
    pub epsilon: f64,
    pub max_iter: usize,
    /// L1 row-marginal violation accepted as converged.
    pub tol: f64,
    /// Anneal from a large regularisation down to `epsilon`, warm-starting
    /// the dual potentials at every stage.
    pub anneal: bool,
}

impl Default for EntropicOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            max_iter: 10_000,
            tol: 1e-6,
            anneal: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropicEstimate<S> {
    /// `(sum_ij pi_ij C_ij)^(1/p)` for the regularised plan; biased upwards
    /// relative to the exact distance.
    pub value: S,
    pub converged: bool,
    pub marginal_error: S,
    pub iterations: usize,
}

fn log_sum_exp<S: Scalar>(it: impl Iterator<Item = S> + Clone) -> S {
    let m = it.clone().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<S>().ln()
}

/// Log-domain Sinkhorn estimate of `W_p` for laws of any sizes and weights.
///
/// Never errors on non-convergence: when `max_iter` is exhausted with a
/// marginal violation above `tol` the last iterate is returned with
/// `converged = false`.
pub fn wasserstein_entropic<S: Scalar>(
    mu: &EmpiricalLaw<S>,
    nu: &EmpiricalLaw<S>,
    p: S,
    opts: &EntropicOptions,
) -> Result<EntropicEstimate<S>, MeasureError> {
    check_p(p)?;
    if mu.dim() != nu.dim() {
        return Err(MeasureError::DimensionMismatch(mu.dim(), nu.dim()));
    }
    if !(opts.epsilon > 0.0) {
        return Err(MeasureError::BadRegularisation(opts.epsilon));
    }
    let (n, m) = (mu.len(), nu.len());
    let mut cost = Vec::with_capacity(n * m);
    for i in 0..n {
        cost.extend((0..m).map(|j| pow_abs(dist(mu.point(i), nu.point(j)), p)));
    }
    let cmax = cost.iter().copied().fold(S::zero(), S::max);
    if cmax == S::zero() {
        return Ok(EntropicEstimate {
            value: S::zero(),
            converged: true,
            marginal_error: S::zero(),
            iterations: 0,
        });
    }
    let la: Vec<S> = mu.weights().iter().map(|w| w.ln()).collect();
    let lb: Vec<S> = nu.weights().iter().map(|w| w.ln()).collect();
    let mut f = vec![S::zero(); n];
    let mut g = vec![S::zero(); m];
    let target = S::lit(opts.epsilon);
    let tol = S::lit(opts.tol);
    let mut eps = if opts.anneal {
        cmax.max(target)
    } else {
        target
    };
    let mut iterations = 0;
    let mut err = S::infinity();

    loop {
        let last_stage = eps <= target;
        let stage_tol = if last_stage {
            tol
        } else {
            tol.max(S::lit(1e-3))
        };
        while iterations < opts.max_iter {
            iterations += 1;
            for i in 0..n {
                let row = &cost[i * m..(i + 1) * m];
                f[i] = -eps * log_sum_exp((0..m).map(|j| lb[j] + (g[j] - row[j]) / eps));
            }
            for j in 0..m {
                g[j] = -eps * log_sum_exp((0..n).map(|i| la[i] + (f[i] - cost[i * m + j]) / eps));
            }
            err = S::zero();
            for i in 0..n {
                let row = &cost[i * m..(i + 1) * m];
                let mass: S = (0..m)
                    .map(|j| (la[i] + lb[j] + (f[i] + g[j] - row[j]) / eps).exp())
                    .sum();
                err = err + (mass - mu.weights()[i]).abs();
            }
            if err <= stage_tol {
                break;
            }
        }
        if last_stage || iterations >= opts.max_iter {
            break;
        }
        eps = (eps * S::lit(0.5)).max(target);
    }

    let mut total = S::zero();
    for i in 0..n {
        for j in 0..m {
            let c = cost[i * m + j];
            total = total + (la[i] + lb[j] + (f[i] + g[j] - c) / eps).exp() * c;
        }
    }
    Ok(EntropicEstimate {
        value: root(total, p),
        converged: err <= tol && eps <= target,
        marginal_error: err,
        iterations,
    })
}

/// Exact matching distance between two equally sized ensembles under the
/// cost `sup_{s <= t} |x_s - y_s|^p`, the supremum running over grid
/// points up to and including `t`.
pub fn truncated_path_distance<S: Scalar>(
    a: &PathEnsemble<S>,
    b: &PathEnsemble<S>,
    t: S,
    p: S,
) -> Result<S, MeasureError> {
    check_p(p)?;
    if !same_grid(a.time_grid(), b.time_grid()) {
        return Err(MeasureError::GridMismatch(t.as_f64()));
    }
    if a.dim() != b.dim() {
        return Err(MeasureError::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.len() != b.len() {
        return Err(MeasureError::SizeMismatch(a.len(), b.len()));
    }
    let last = grid_index(a.time_grid(), t).ok_or(MeasureError::GridMismatch(t.as_f64()))?;
    let n = a.len();
    if n > DEFAULT_EXACT_CAP {
        return Err(MeasureError::CapExceeded {
            n,
            cap: DEFAULT_EXACT_CAP,
        });
    }
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let sup = (0..=last)
                .map(|k| dist(a.state(i, k), b.state(j, k)))
                .fold(S::zero(), S::max);
            cost.push(pow_abs(sup, p));
        }
    }
    let asg = min_cost_assignment(&cost, n);
    Ok(root(asg.cost / S::from_usize_lossy(n), p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::uniform_grid;

    fn law(v: &[f64]) -> EmpiricalLaw<f64> {
        EmpiricalLaw::from_values(v).unwrap()
    }

    #[test]
    fn one_d_examples() {
        assert_eq!(
            wasserstein_1d(&law(&[0.0]), &law(&[1.0]), 2.0).unwrap(),
            1.0
        );
        // Couplings of {0,1} with {0,3}: identity costs (0 + 2)/2 = 1, swap (3 + 1)/2 = 2.
        assert_eq!(
            wasserstein_1d(&law(&[0.0, 1.0]), &law(&[0.0, 3.0]), 1.0).unwrap(),
            1.0
        );
        let m = law(&[0.3, -2.0, 5.0]);
        assert_eq!(wasserstein_1d(&m, &m, 1.5).unwrap(), 0.0);
        assert!(matches!(
            wasserstein_1d(&EmpiricalLaw::dirac(&[0.0, 0.0]), &law(&[0.0]), 1.0),
            Err(MeasureError::DimensionMismatch(2, 1))
        ));
    }

    #[test]
    fn one_d_general_weights() {
        // 0.25 mass at 0 and 0.75 at 1 against a point mass at 1.
        let mu = EmpiricalLaw::with_weights(vec![0.0, 1.0], 1, vec![0.25, 0.75]).unwrap();
        let nu = law(&[1.0]);
        assert!((wasserstein_1d(&mu, &nu, 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((wasserstein_1d(&mu, &nu, 2.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_examples() {
        let mu = EmpiricalLaw::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let nu = EmpiricalLaw::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!((wasserstein_exact::<f64>(&mu, &nu, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(wasserstein_exact(&mu, &mu, 2.0).unwrap(), 0.0);
        assert!(matches!(
            wasserstein_exact(&mu, &law(&[0.0]), 1.0),
            Err(MeasureError::DimensionMismatch(..))
        ));
        let big = law(&vec![0.0; 8]);
        assert!(matches!(
            wasserstein_exact_capped(&big, &big, 1.0, 4),
            Err(MeasureError::CapExceeded { n: 8, cap: 4 })
        ));
        assert!(matches!(
            wasserstein_exact(&law(&[0.0, 1.0]), &law(&[0.0]), 1.0),
            Err(MeasureError::SizeMismatch(2, 1))
        ));
    }

    #[test]
    fn entropic_trivial_and_mismatched() {
        let d = law(&[0.0]);
        let e = wasserstein_entropic(&d, &d, 2.0, &EntropicOptions::default()).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.converged);
        let a = law(&(0..100).map(|i| i as f64 / 100.0).collect::<Vec<_>>());
        let b = law(&(0..37).map(|i| 0.5 + i as f64 / 37.0).collect::<Vec<_>>());
        let e = wasserstein_entropic(&a, &b, 2.0, &EntropicOptions::default()).unwrap();
        assert!(e.value.is_finite() && e.value > 0.0);
    }

    #[test]
    fn entropic_reports_non_convergence() {
        let a = law(&[0.0, 1.0, 2.0]);
        let b = law(&[0.5, 3.0]);
        let opts = EntropicOptions {
            epsilon: 1e-4,
            max_iter: 2,
            ..EntropicOptions::default()
        };
        let e = wasserstein_entropic(&a, &b, 1.0, &opts).unwrap();
        assert!(!e.converged);
        assert!(e.value.is_finite());
    }

    #[test]
    fn truncated_distance_examples() {
        let grid = uniform_grid(1.0, 4);
        let zero = PathEnsemble::new(1, 1, grid.clone(), vec![0.0; 5]).unwrap();
        let ramp = PathEnsemble::new(1, 1, grid.clone(), grid.clone()).unwrap();
        assert!(
            (truncated_path_distance::<f64>(&zero, &ramp, 0.5, 1.0).unwrap() - 0.5).abs() < 1e-15
        );
        assert_eq!(
            truncated_path_distance(&ramp, &ramp, 1.0, 2.0).unwrap(),
            0.0
        );
        assert!(matches!(
            truncated_path_distance(&zero, &ramp, 0.3, 1.0),
            Err(MeasureError::GridMismatch(_))
        ));
        let other = PathEnsemble::new(1, 1, uniform_grid(2.0, 4), vec![0.0; 5]).unwrap();
        assert!(truncated_path_distance(&zero, &other, 0.0, 1.0).is_err());
    }

    #[test]
    fn truncated_at_zero_is_marginal_distance() {
        let grid = uniform_grid(1.0, 3);
        let a = PathEnsemble::new(
            2,
            1,
            grid.clone(),
            vec![0.0, 1.0, 2.0, 3.0, 5.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let b =
            PathEnsemble::new(2, 1, grid, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let d0 = truncated_path_distance::<f64>(&a, &b, 0.0, 2.0).unwrap();
        let m = wasserstein_exact(&a.marginal(0).unwrap(), &b.marginal(0).unwrap(), 2.0).unwrap();
        assert!((d0 - m).abs() < 1e-15);
    }
}
