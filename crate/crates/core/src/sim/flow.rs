use serde::{Deserialize, Serialize};

use super::SimError;
use crate::measure::{check_grid, same_grid, PathEnsemble};
use crate::model::{MeasureView, ModelSpec};
use crate::{norm, pow_abs, Scalar};

/// A frozen measure flow: one [`MeasureView`] per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow<S: Scalar> {
    time_grid: Vec<S>,
    views: Vec<MeasureView<S>>,
}

/// Moment summary of a flow, for persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FlowSummary<S: Scalar> {
    pub time_grid: Vec<S>,
    pub means: Vec<Vec<S>>,
    pub p_moments: Vec<S>,
}

/// `E|mu + s Z|^p` for standard normal `Z`.
pub(crate) fn gaussian_abs_moment(mu: f64, s: f64, p: f64) -> f64 {
    if s == 0.0 {
        return mu.abs().powf(p);
    }
    if p == 1.0 {
        let z = mu / s;
        let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        return s * 2.0 * pdf + mu * (1.0 - 2.0 * normal_cdf(-z));
    }
    if p == 2.0 {
        return mu * mu + s * s;
    }
    // Composite Simpson over +-12 standard deviations.
    let m = 6000;
    let h = 24.0 / m as f64;
    let mut acc = 0.0;
    for i in 0..=m {
        let z = -12.0 + h * i as f64;
        let w = if i == 0 || i == m {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * (mu + s * z).abs().powf(p) * (-0.5 * z * z).exp();
    }
    acc * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal distribution function.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function, accurate to about 1e-15 relative.
pub(crate) fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        // Series for erf.
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        for k in 1..80 {
            term *= -x2 / k as f64;
            sum += term / (2 * k + 1) as f64;
        }
        return 1.0 - sum * 2.0 / std::f64::consts::PI.sqrt();
    }
    // Continued fraction (modified Lentz).
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..300 {
        let a = k as f64 * 0.5;
        d = x + a * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = x + a / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / f / std::f64::consts::PI.sqrt()
}

impl<S: Scalar> MeasureFlow<S> {
    pub fn new(time_grid: Vec<S>, views: Vec<MeasureView<S>>) -> Result<Self, SimError> {
        check_grid(&time_grid)?;
        if views.len() != time_grid.len() {
            return Err(SimError::FlowLength {
                expected: time_grid.len(),
                got: views.len(),
            });
        }
        let dim = views[0].dim();
        if views.iter().any(|v| {
            v.dim() != dim || !v.p_moment.is_finite() || v.mean.iter().any(|m| !m.is_finite())
        }) {
            return Err(SimError::Config(
                "flow entries must be finite and of equal dimension".into(),
            ));
        }
        Ok(Self { time_grid, views })
    }

    /// Empirical flow of an ensemble, with the model's moment exponent.
    pub fn from_paths(model: &ModelSpec<S>, paths: &PathEnsemble<S>) -> Result<Self, SimError> {
        if !paths.is_finite() {
            return Err(SimError::Config(
                "cannot build a flow from non-finite paths".into(),
            ));
        }
        let d = paths.dim();
        let mut states = vec![S::zero(); paths.len() * d];
        let views = (0..=paths.steps())
            .map(|k| {
                for i in 0..paths.len() {
                    states[i * d..(i + 1) * d].copy_from_slice(paths.state(i, k));
                }
                model.empirical_view(&states)
            })
            .collect();
        Self::new(paths.time_grid().to_vec(), views)
    }

    /// The same view at every grid point.
    pub fn constant(view: MeasureView<S>, time_grid: Vec<S>) -> Result<Self, SimError> {
        let views = vec![view; time_grid.len()];
        Self::new(time_grid, views)
    }

    /// Flow of one-dimensional Gaussian laws `N(means[k], variances[k])`.
    pub fn gaussian_1d(
        time_grid: Vec<S>,
        means: &[S],
        variances: &[S],
        p: S,
    ) -> Result<Self, SimError> {
        if means.len() != variances.len() {
            return Err(SimError::Config(
                "means and variances differ in length".into(),
            ));
        }
        let views = means
            .iter()
            .zip(variances)
            .map(|(&m, &v)| {
                let mom =
                    gaussian_abs_moment(m.as_f64(), v.max(S::zero()).sqrt().as_f64(), p.as_f64());
                MeasureView::new(vec![m], S::lit(mom))
            })
            .collect();
        Self::new(time_grid, views)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn time_grid(&self) -> &[S] {
        &self.time_grid
    }

    pub fn views(&self) -> &[MeasureView<S>] {
        &self.views
    }

    pub fn view(&self, k: usize) -> &MeasureView<S> {
        &self.views[k]
    }

    pub fn means(&self) -> Vec<Vec<S>> {
        self.views.iter().map(|v| v.mean.clone()).collect()
    }

    pub fn matches_grid(&self, grid: &[S]) -> bool {
        same_grid(&self.time_grid, grid)
    }

    /// `sup_k (|mean_k - mean'_k| + |M_p,k - M'_p,k|)`.
    pub fn sup_distance(&self, other: &Self) -> S {
        self.views
            .iter()
            .zip(&other.views)
            .map(|(a, b)| {
                let dm: Vec<S> = a.mean.iter().zip(&b.mean).map(|(&x, &y)| x - y).collect();
                norm(&dm) + (a.p_moment - b.p_moment).abs()
            })
            .fold(S::zero(), S::max)
    }

    pub fn summary(&self) -> FlowSummary<S> {
        FlowSummary {
            time_grid: self.time_grid.clone(),
            means: self.means(),
            p_moments: self.views.iter().map(|v| v.p_moment).collect(),
        }
    }

    pub fn from_summary(s: &FlowSummary<S>) -> Result<Self, SimError> {
        let views = s
            .means
            .iter()
            .zip(&s.p_moments)
            .map(|(m, &p)| MeasureView::new(m.clone(), p))
            .collect();
        Self::new(s.time_grid.clone(), views)
    }

    /// Flow whose means are shifted by `shift`, with `p`-moments of the
    /// shifted sample clouds when those are present and otherwise kept.
    pub fn with_mean_shift(&self, shift: &[S], p: S) -> Self {
        let views = self
            .views
            .iter()
            .map(|v| {
                let mean: Vec<S> = v.mean.iter().zip(shift).map(|(&m, &s)| m + s).collect();
                match &v.samples {
                    Some(law) => {
                        let moved = law.translated(shift);
                        MeasureView::from_law(&moved, p, true)
                    }
                    None => MeasureView {
                        p_moment: v.p_moment.max(pow_abs(norm(&mean), p)),
                        mean,
                        samples: None,
                    },
                }
            })
            .collect();
        Self {
            time_grid: self.time_grid.clone(),
            views,
        }
    }
}
