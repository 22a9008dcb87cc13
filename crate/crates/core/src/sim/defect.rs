use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MeasureFlow, SimError, SimOutput};
use crate::control::averaged_diffusion;
use crate::model::ModelSpec;
use crate::Scalar;

/// Smooth test function with closed-form derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound = "")]
pub enum TestFunction<S: Scalar> {
    /// `x_index`.
    Coordinate { index: usize },
    /// `|x|^2`.
    Quadratic,
    /// `exp(-|x - center|^2 / (2 width^2))`.
    Bump { center: Vec<S>, width: S },
}

impl<S: Scalar> TestFunction<S> {
    pub fn value(&self, x: &[S]) -> S {
        match self {
            TestFunction::Coordinate { index } => x[*index],
            TestFunction::Quadratic => x.iter().map(|&v| v * v).sum(),
            TestFunction::Bump { center, width } => bump(x, center, *width),
        }
    }

    pub fn gradient(&self, x: &[S], out: &mut [S]) {
        match self {
            TestFunction::Coordinate { index } => {
                out.iter_mut().for_each(|v| *v = S::zero());
                out[*index] = S::one();
            }
            TestFunction::Quadratic => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = S::lit(2.0) * v;
                }
            }
            TestFunction::Bump { center, width } => {
                let f = bump(x, center, *width);
                let w2 = *width * *width;
                for ((o, &v), &c) in out.iter_mut().zip(x).zip(center) {
                    *o = -f * (v - c) / w2;
                }
            }
        }
    }

    /// Row-major `d × d` Hessian.
    pub fn hessian(&self, x: &[S], out: &mut [S]) {
        let d = x.len();
        out.iter_mut().for_each(|v| *v = S::zero());
        match self {
            TestFunction::Coordinate { .. } => {}
            TestFunction::Quadratic => {
                for i in 0..d {
                    out[i * d + i] = S::lit(2.0);
                }
            }
            TestFunction::Bump { center, width } => {
                let f = bump(x, center, *width);
                let w2 = *width * *width;
                for i in 0..d {
                    for j in 0..d {
                        let dij = if i == j { S::one() } else { S::zero() };
                        out[i * d + j] =
                            f * ((x[i] - center[i]) * (x[j] - center[j]) / (w2 * w2) - dij / w2);
                    }
                }
            }
        }
    }

    fn check(&self, d: usize) -> Result<(), SimError> {
        let ok = match self {
            TestFunction::Coordinate { index } => *index < d,
            TestFunction::Quadratic => true,
            TestFunction::Bump { center, width } => center.len() == d && *width > S::zero(),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(
                "test function does not fit the state dimension".into(),
            ))
        }
    }
}

fn bump<S: Scalar>(x: &[S], c: &[S], w: S) -> S {
    let r2: S = x.iter().zip(c).map(|(&a, &b)| (a - b) * (a - b)).sum();
    (-r2 / (S::lit(2.0) * w * w)).exp()
}

/// Multiplier `h(X_s)` of the martingale increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound = "")]
pub enum DefectWeight<S: Scalar> {
    One,
    Bump { center: Vec<S>, width: S },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DefectEstimate<S: Scalar> {
    pub mean: S,
    pub std_error: S,
    pub n: usize,
}

/// Monte Carlo estimate of `E[M_t - M_s]` for
/// `M_t = phi(X_t) - sum_{t_k < t} dt L phi(t_k, X_k)`, where the generator
/// `L phi = b . grad phi + tr(sigma sigma^T hess phi) / 2` is averaged over
/// the applied atoms and evaluated with the measure argument of `flow`.
pub fn martingale_defect<S: Scalar>(
    model: &ModelSpec<S>,
    output: &SimOutput<S>,
    flow: &MeasureFlow<S>,
    test_fn: &TestFunction<S>,
    s: S,
    t: S,
) -> Result<DefectEstimate<S>, SimError> {
    martingale_defect_weighted(model, output, flow, test_fn, &DefectWeight::One, s, t)
}

/// As [`martingale_defect`] with the increment multiplied by `h(X_s)`.
pub fn martingale_defect_weighted<S: Scalar>(
    model: &ModelSpec<S>,
    output: &SimOutput<S>,
    flow: &MeasureFlow<S>,
    test_fn: &TestFunction<S>,
    weight: &DefectWeight<S>,
    s: S,
    t: S,
) -> Result<DefectEstimate<S>, SimError> {
    if output.blew_up() {
        let (step, particle) = output.diagnostics.blowup.unwrap_or((0, 0));
        return Err(SimError::NumericalBlowup { step, particle });
    }
    let paths = &output.paths;
    let d = model.dim_state;
    test_fn.check(d)?;
    if !flow.matches_grid(paths.time_grid()) {
        return Err(SimError::GridMismatch);
    }
    let (ks, kt) = match (paths.grid_index(s), paths.grid_index(t)) {
        (Some(a), Some(b)) if a < b => (a, b),
        _ => return Err(SimError::GridMismatch),
    };
    let grid = paths.time_grid();
    let steps = paths.steps();
    let dw = model.dim_noise;
    let samples: Vec<S> = (0..paths.len())
        .into_par_iter()
        .map_init(
            || {
                (
                    vec![S::zero(); d],
                    vec![S::zero(); d * d],
                    vec![S::zero(); d],
                    vec![S::zero(); d * dw],
                    vec![S::zero(); d * d],
                )
            },
            |(grad, hess, b, sigma, cov), i| {
                let mut integral = S::zero();
                for k in ks..kt {
                    let x = paths.state(i, k);
                    let m = flow.view(k);
                    let dtk = grid[k + 1] - grid[k];
                    test_fn.gradient(x, grad);
                    test_fn.hessian(x, hess);
                    let atoms = output.controls.atoms(i, k, steps);
                    let mut drift_term = S::zero();
                    for atom in &atoms {
                        model.coefficients.drift(grid[k], x, m, &atom.action, b);
                        drift_term = drift_term
                            + atom.weight
                                * b.iter().zip(grad.iter()).map(|(&u, &v)| u * v).sum::<S>();
                    }
                    averaged_diffusion(model, grid[k], x, m, &atoms, sigma, cov);
                    let trace: S = cov.iter().zip(hess.iter()).map(|(&c, &h)| c * h).sum();
                    integral = integral + dtk * (drift_term + S::lit(0.5) * trace);
                }
                let xs = paths.state(i, ks);
                let h = match weight {
                    DefectWeight::One => S::one(),
                    DefectWeight::Bump { center, width } => bump(xs, center, *width),
                };
                h * (test_fn.value(paths.state(i, kt)) - test_fn.value(xs) - integral)
            },
        )
        .collect();
    let n = samples.len();
    let nn = S::from_usize_lossy(n);
    let mean = samples.iter().copied().sum::<S>() / nn;
    let var = if n > 1 {
        samples.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / S::from_usize_lossy(n - 1)
    } else {
        S::zero()
    };
    Ok(DefectEstimate {
        mean,
        std_error: (var / nn).sqrt(),
        n,
    })
}
