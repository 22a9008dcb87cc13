use serde::{Deserialize, Serialize};

use super::OptimizeError;
use crate::control::{FeedbackPolicy, PolicyFamily};
use crate::measure::uniform_grid;
use crate::model::{LqParams, ModelSpec};
use crate::sim::MeasureFlow;
use crate::Scalar;

/// Sub-steps of the fourth-order integrator per simulation step.
const SUBSTEPS: usize = 16;
const ESCAPE: f64 = 1e12;

/// Value-function coefficients at one grid time: `v(t, x) = -(P y^2 +
/// Pi xbar^2)/2 - c(t)` with `y = x - xbar`, plus the optimal state moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RiccatiPoint<S: Scalar> {
    pub t: S,
    /// Fluctuation coefficient.
    pub p: S,
    /// Mean coefficient.
    pub pi: S,
    pub mean: S,
    pub variance: S,
}

#[derive(Debug, Clone)]
pub struct OracleSolution<S: Scalar> {
    pub riccati_path: Vec<RiccatiPoint<S>>,
    /// Linear feedback `a = -(P/r) x + ((P - Pi)/r) xbar` with knots on the
    /// simulation grid.
    pub policy: FeedbackPolicy<S>,
    /// Optimal value of the mean-field problem.
    pub value: S,
    /// Gaussian law of the optimally controlled state.
    pub mean_flow: MeasureFlow<S>,
}

fn riccati(p: f64, a: f64, r: f64, q: f64) -> f64 {
    // Backward-time derivative -dP/dt.
    2.0 * a * p - p * p / r + q
}

/// Closed-form benchmark for the scalar mean-field linear-quadratic model.
///
/// Writing `X = xbar + y`, the mean and the fluctuation decouple into two
/// scalar LQ problems with Riccati equations
///
/// ```text
/// -P'  = 2 beta P - P^2/r + q + q_bar,                P(T)  = q_t + q_bar_t
/// -Pi' = 2 (beta + gamma) Pi - Pi^2/r + q + q_bar (1 - s)^2,
///                                                     Pi(T) = q_t + q_bar_t (1 - s_t)^2
/// ```
///
/// and the optimal value is
/// `-(P(0) Var_0 + Pi(0) xbar_0^2 + sigma0^2 int P dt) / 2`.
/// All equations are integrated with classical RK4.
pub fn solve_lq_oracle<S: Scalar>(
    model: &ModelSpec<S>,
    steps: usize,
) -> Result<OracleSolution<S>, OptimizeError> {
    let lq: LqParams<f64> = {
        let p = model.lq_params().ok_or(OptimizeError::NotLq)?;
        LqParams {
            beta: p.beta.as_f64(),
            gamma: p.gamma.as_f64(),
            sigma0: p.sigma0.as_f64(),
            q: p.q.as_f64(),
            q_bar: p.q_bar.as_f64(),
            s: p.s.as_f64(),
            r: p.r.as_f64(),
            q_t: p.q_t.as_f64(),
            q_bar_t: p.q_bar_t.as_f64(),
            s_t: p.s_t.as_f64(),
            a_max: p.a_max.as_f64(),
        }
    };
    if steps == 0 {
        return Err(OptimizeError::Config("steps must be >= 1".into()));
    }
    let horizon = model.horizon.as_f64();
    let fine = steps * SUBSTEPS;
    let h = horizon / fine as f64;
    let q_fluct = lq.q + lq.q_bar;
    let q_mean = lq.q + lq.q_bar * (1.0 - lq.s).powi(2);
    let a_mean = lq.beta + lq.gamma;

    // Backward sweep on the fine grid.
    let mut p = vec![0.0; fine + 1];
    let mut pi = vec![0.0; fine + 1];
    p[fine] = lq.q_t + lq.q_bar_t;
    pi[fine] = lq.q_t + lq.q_bar_t * (1.0 - lq.s_t).powi(2);
    let rk4 = |y: f64, a: f64, q: f64| {
        let k1 = riccati(y, a, lq.r, q);
        let k2 = riccati(y + 0.5 * h * k1, a, lq.r, q);
        let k3 = riccati(y + 0.5 * h * k2, a, lq.r, q);
        let k4 = riccati(y + h * k3, a, lq.r, q);
        y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    };
    for j in (0..fine).rev() {
        p[j] = rk4(p[j + 1], lq.beta, q_fluct);
        pi[j] = rk4(pi[j + 1], a_mean, q_mean);
        if !(p[j].abs() < ESCAPE && pi[j].abs() < ESCAPE) {
            return Err(OptimizeError::RiccatiBlowup { t: j as f64 * h });
        }
    }

    // Forward sweep for mean, variance and the running integral of P with
    // step 2h, reading stage values from the stored fine grid.
    let mean0 = model.initial_law.mean()[0].as_f64();
    let var0 = model.initial_law.variance()[0].as_f64();
    let sig2 = lq.sigma0 * lq.sigma0;
    let rhs = |j: usize, y: [f64; 3]| -> [f64; 3] {
        [
            (a_mean - pi[j] / lq.r) * y[0],
            2.0 * (lq.beta - p[j] / lq.r) * y[1] + sig2,
            p[j],
        ]
    };
    let mut y = [mean0, var0, 0.0];
    let mut means = vec![mean0];
    let mut vars = vec![var0];
    let big = 2.0 * h;
    let mut j = 0;
    while j < fine {
        let (a0, a1, a2) = (j, j + 1, j + 2);
        let k1 = rhs(a0, y);
        let k2 = rhs(a1, std::array::from_fn(|i| y[i] + 0.5 * big * k1[i]));
        let k3 = rhs(a1, std::array::from_fn(|i| y[i] + 0.5 * big * k2[i]));
        let k4 = rhs(a2, std::array::from_fn(|i| y[i] + big * k3[i]));
        for i in 0..3 {
            y[i] += big / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        j += 2;
        if j % SUBSTEPS == 0 {
            means.push(y[0]);
            vars.push(y[1]);
        }
    }
    let value = -0.5 * (p[0] * var0 + pi[0] * mean0 * mean0 + sig2 * y[2]);

    let grid = uniform_grid(model.horizon, steps);
    let riccati_path: Vec<RiccatiPoint<S>> = (0..=steps)
        .map(|k| RiccatiPoint {
            t: grid[k],
            p: S::lit(p[k * SUBSTEPS]),
            pi: S::lit(pi[k * SUBSTEPS]),
            mean: S::lit(means[k]),
            variance: S::lit(vars[k]),
        })
        .collect();
    OracleSolution::from_path(model, riccati_path, S::lit(value))
}

impl<S: Scalar> OracleSolution<S> {
    /// Rebuilds the policy and the law from stored Riccati coefficients.
    pub fn from_path(
        model: &ModelSpec<S>,
        riccati_path: Vec<RiccatiPoint<S>>,
        value: S,
    ) -> Result<Self, OptimizeError> {
        let r = model.lq_params().ok_or(OptimizeError::NotLq)?.r;
        if riccati_path.len() < 2 {
            return Err(OptimizeError::Config(
                "Riccati path needs at least two points".into(),
            ));
        }
        let steps = riccati_path.len() - 1;
        let grid: Vec<S> = riccati_path.iter().map(|pt| pt.t).collect();
        let mut theta = Vec::with_capacity(2 * steps);
        for pt in &riccati_path[..steps] {
            theta.push(-pt.p / r);
            theta.push((pt.p - pt.pi) * pt.mean / r);
        }
        let policy = FeedbackPolicy::new(
            PolicyFamily::Linear {
                knots: grid.clone(),
            },
            theta,
            1,
            model.action_set.clone(),
        )?;
        let means: Vec<S> = riccati_path.iter().map(|pt| pt.mean).collect();
        let vars: Vec<S> = riccati_path.iter().map(|pt| pt.variance).collect();
        let mean_flow = MeasureFlow::gaussian_1d(grid, &means, &vars, model.exponents.p)?;
        Ok(Self {
            riccati_path,
            policy,
            value,
            mean_flow,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::builtin_model;

    fn lq(over: &[(&str, f64)]) -> ModelSpec<f64> {
        let params: BTreeMap<String, f64> = over.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        builtin_model("lq_meanfield", &params).unwrap()
    }

    #[test]
    fn scalar_riccati_matches_closed_form() {
        let (beta, q, r, pt) = (0.3, 2.0, 0.5, 1.5);
        let m = lq(&[
            ("beta", beta),
            ("gamma", 0.0),
            ("q", q),
            ("q_bar", 0.0),
            ("s", 0.0),
            ("r", r),
            ("q_t", pt),
            ("q_bar_t", 0.0),
            ("s_t", 0.0),
        ]);
        let sol = solve_lq_oracle(&m, 50).unwrap();
        let disc = (beta * beta + q / r).sqrt();
        let (pp, pm) = (r * (beta + disc), r * (beta - disc));
        let c = (pt - pp) / (pt - pm);
        for pt_k in &sol.riccati_path {
            let tau = 1.0 - pt_k.t;
            let e = c * (-(pp - pm) * tau / r).exp();
            let exact = (pp - e * pm) / (1.0 - e);
            assert!(
                (pt_k.p - exact).abs() < 1e-9,
                "t={} {} vs {}",
                pt_k.t,
                pt_k.p,
                exact
            );
            // Without mean-field terms both equations coincide.
            assert!((pt_k.pi - pt_k.p).abs() < 1e-12);
        }
    }

    #[test]
    fn value_is_consistent_with_moments() {
        let m = lq(&[("init_mean", 0.7)]);
        let sol = solve_lq_oracle(&m, 200).unwrap();
        let first = sol.riccati_path[0];
        assert!((first.mean - 0.7).abs() < 1e-15);
        assert!((first.variance - 0.25).abs() < 1e-15);
        let last = sol.riccati_path.last().unwrap();
        assert!((last.p - 2.0).abs() < 1e-12);
        assert!((last.pi - 5.0).abs() < 1e-12);
        assert!(sol.value < 0.0);
        assert_eq!(sol.mean_flow.len(), 201);
        assert!((sol.mean_flow.means()[200][0] - last.mean).abs() < 1e-12);
    }

    #[test]
    fn zero_costs_give_zero_policy_and_value() {
        let m = lq(&[("q", 0.0), ("q_bar", 0.0), ("q_t", 0.0), ("q_bar_t", 0.0)]);
        let sol = solve_lq_oracle(&m, 20).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.policy.theta().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_rewards_scales_value_not_policy() {
        let m = lq(&[("init_mean", 0.4)]);
        let base = solve_lq_oracle(&m, 40).unwrap();
        let scaled = m
            .with_lq_params(m.lq_params().unwrap().scaled_rewards(3.0))
            .unwrap();
        let sol = solve_lq_oracle(&scaled, 40).unwrap();
        assert!((sol.value - 3.0 * base.value).abs() < 1e-9 * base.value.abs());
        for (a, b) in sol.policy.theta().iter().zip(base.policy.theta()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_flips_with_initial_mean() {
        let pos = solve_lq_oracle(&lq(&[("init_mean", 0.5)]), 30).unwrap();
        let neg = solve_lq_oracle(&lq(&[("init_mean", -0.5)]), 30).unwrap();
        assert_eq!(pos.value, neg.value);
        for (a, b) in pos.riccati_path.iter().zip(&neg.riccati_path) {
            assert_eq!(a.mean, -b.mean);
        }
    }

    #[test]
    fn rejects_other_models() {
        let m: ModelSpec<f64> = builtin_model("ou_chaos", &BTreeMap::new()).unwrap();
        assert!(matches!(solve_lq_oracle(&m, 10), Err(OptimizeError::NotLq)));
    }
}
