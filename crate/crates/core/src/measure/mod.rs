//! Empirical measures, path ensembles and optimal-transport distances.

mod assignment;
mod io;
mod simplex;
mod transport;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{pow_abs, Scalar};

pub use assignment::{min_cost_assignment, Assignment};
pub use io::{
    read_ensemble, read_ensemble_file, write_ensemble, write_ensemble_csv, write_ensemble_file,
};
pub use simplex::transport_cost;
pub use transport::{
    truncated_path_distance, wasserstein_1d, wasserstein_entropic, wasserstein_exact,
    wasserstein_exact_capped, EntropicEstimate, EntropicOptions, DEFAULT_EXACT_CAP,
};

#[derive(Debug, Error, Clone)]
pub enum MeasureError {
    #[error("empty law")]
    Empty,
    #[error("point buffer of length {len} is not a multiple of dimension {dim}")]
    Shape { len: usize, dim: usize },
    #[error("weights must be nonnegative and sum to 1 (sum = {0})")]
    BadWeights(f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("size mismatch: {0} vs {1} atoms")]
    SizeMismatch(usize, usize),
    #[error("exact solver requires uniform weights")]
    NonUniformWeights,
    #[error("{n} atoms exceed the exact-solver cap of {cap}; use the entropic estimate")]
    CapExceeded { n: usize, cap: usize },
    #[error("time grids differ or time {0} is not a grid point")]
    GridMismatch(f64),
    #[error("invalid time grid: {0}")]
    BadGrid(String),
    #[error("transport exponent must be >= 1, got {0}")]
    BadExponent(f64),
    #[error("regularisation must be positive, got {0}")]
    BadRegularisation(f64),
    #[error("ensemble format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::sync::Arc<std::io::Error>),
}

impl From<std::io::Error> for MeasureError {
    fn from(e: std::io::Error) -> Self {
        MeasureError::Io(std::sync::Arc::new(e))
    }
}

pub(crate) fn weight_tol<S: Scalar>() -> S {
    S::lit(1e-12).max(S::epsilon() * S::lit(64.0))
}

/// Weighted point cloud on `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EmpiricalLaw<S: Scalar> {
    points: Vec<S>,
    dim: usize,
    weights: Vec<S>,
    uniform: bool,
}

impl<S: Scalar> EmpiricalLaw<S> {
    /// Uniform law over the rows of `points` (n × dim, row-major).
    pub fn new(points: Vec<S>, dim: usize) -> Result<Self, MeasureError> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(MeasureError::Shape {
                len: points.len(),
                dim,
            });
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(MeasureError::Empty);
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(MeasureError::NonFinite);
        }
        let w = S::one() / S::from_usize_lossy(n);
        Ok(Self {
            points,
            dim,
            weights: vec![w; n],
            uniform: true,
        })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, MeasureError> {
        let dim = rows.first().map(Vec::len).ok_or(MeasureError::Empty)?;
        if rows.iter().any(|r| r.len() != dim) {
            return Err(MeasureError::Shape {
                len: rows.len(),
                dim,
            });
        }
        Self::new(rows.concat(), dim)
    }

    /// One-dimensional uniform law.
    pub fn from_values(values: &[S]) -> Result<Self, MeasureError> {
        Self::new(values.to_vec(), 1)
    }

    pub fn dirac(point: &[S]) -> Self {
        Self::new(point.to_vec(), point.len()).expect("finite dirac point")
    }

    pub fn with_weights(points: Vec<S>, dim: usize, weights: Vec<S>) -> Result<Self, MeasureError> {
        let mut law = Self::new(points, dim)?;
        if weights.len() != law.len() {
            return Err(MeasureError::SizeMismatch(weights.len(), law.len()));
        }
        let sum: S = weights.iter().copied().sum();
        if weights.iter().any(|w| !(*w >= S::zero())) || (sum - S::one()).abs() > weight_tol() {
            return Err(MeasureError::BadWeights(sum.as_f64()));
        }
        let first = weights[0];
        law.uniform = weights.iter().all(|&w| w == first);
        law.weights = weights;
        Ok(law)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[S] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[S] {
        &self.points
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn mean(&self) -> Vec<S> {
        let mut m = vec![S::zero(); self.dim];
        for (x, &w) in self.points.chunks_exact(self.dim).zip(&self.weights) {
            for (mi, &xi) in m.iter_mut().zip(x) {
                *mi = *mi + w * xi;
            }
        }
        m
    }

    /// `sum_i w_i |x_i|^q`.
    pub fn moment(&self, q: S) -> S {
        moment(self, q)
    }

    /// Law of the atoms shifted by `v`.
    pub fn translated(&self, v: &[S]) -> Self {
        let mut out = self.clone();
        for x in out.points.chunks_exact_mut(self.dim) {
            for (xi, &vi) in x.iter_mut().zip(v) {
                *xi = *xi + vi;
            }
        }
        out
    }

    /// Uniform law over the selected atoms.
    pub fn select(&self, idx: &[usize]) -> Result<Self, MeasureError> {
        let mut pts = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            pts.extend_from_slice(self.point(i));
        }
        Self::new(pts, self.dim)
    }
}

/// `sum_i w_i |x_i|^q` for `q >= 1` (any `q >= 0` is accepted).
pub fn moment<S: Scalar>(law: &EmpiricalLaw<S>, q: S) -> S {
    law.points
        .chunks_exact(law.dim)
        .zip(&law.weights)
        .map(|(x, &w)| w * pow_abs(crate::norm(x), q))
        .sum()
}

/// `n` sampled trajectories on a common time grid, stored as an
/// `n × (steps + 1) × d` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PathEnsemble<S: Scalar> {
    n: usize,
    dim: usize,
    time_grid: Vec<S>,
    data: Vec<S>,
}

pub(crate) fn check_grid<S: Scalar>(grid: &[S]) -> Result<(), MeasureError> {
    if grid.len() < 2 {
        return Err(MeasureError::BadGrid(
            "need at least two grid points".into(),
        ));
    }
    if grid[0] != S::zero() {
        return Err(MeasureError::BadGrid("grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|t| !t.is_finite()) {
        return Err(MeasureError::BadGrid(
            "grid must be strictly increasing and finite".into(),
        ));
    }
    Ok(())
}

/// Uniform grid `0, T/steps, ..., T`.
pub fn uniform_grid<S: Scalar>(horizon: S, steps: usize) -> Vec<S> {
    let dt = horizon / S::from_usize_lossy(steps);
    (0..=steps)
        .map(|k| {
            if k == steps {
                horizon
            } else {
                dt * S::from_usize_lossy(k)
            }
        })
        .collect()
}

impl<S: Scalar> PathEnsemble<S> {
    pub fn new(
        n: usize,
        dim: usize,
        time_grid: Vec<S>,
        data: Vec<S>,
    ) -> Result<Self, MeasureError> {
        let e = Self::new_unchecked(n, dim, time_grid, data)?;
        if e.data.iter().any(|v| !v.is_finite()) {
            return Err(MeasureError::NonFinite);
        }
        Ok(e)
    }

    /// Like [`PathEnsemble::new`] but tolerates non-finite values, which
    /// simulations produce after a blow-up.
    pub fn new_unchecked(
        n: usize,
        dim: usize,
        time_grid: Vec<S>,
        data: Vec<S>,
    ) -> Result<Self, MeasureError> {
        check_grid(&time_grid)?;
        if n == 0 {
            return Err(MeasureError::Empty);
        }
        if dim == 0 || data.len() != n * time_grid.len() * dim {
            return Err(MeasureError::Shape {
                len: data.len(),
                dim,
            });
        }
        Ok(Self {
            n,
            dim,
            time_grid,
            data,
        })
    }

    /// Ensemble of constant-in-time paths.
    pub fn constant(law: &EmpiricalLaw<S>, time_grid: Vec<S>) -> Result<Self, MeasureError> {
        let k = time_grid.len();
        let d = law.dim();
        let mut data = Vec::with_capacity(law.len() * k * d);
        for i in 0..law.len() {
            for _ in 0..k {
                data.extend_from_slice(law.point(i));
            }
        }
        Self::new(law.len(), d, time_grid, data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.time_grid.len() - 1
    }

    pub fn time_grid(&self) -> &[S] {
        &self.time_grid
    }

    pub fn horizon(&self) -> S {
        *self.time_grid.last().expect("grid has points")
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn state(&self, particle: usize, step: usize) -> &[S] {
        let k = self.time_grid.len();
        let o = (particle * k + step) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn path(&self, particle: usize) -> &[S] {
        let len = self.time_grid.len() * self.dim;
        &self.data[particle * len..(particle + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Time-`step` marginal as a uniform law.
    pub fn marginal(&self, step: usize) -> Result<EmpiricalLaw<S>, MeasureError> {
        let mut pts = Vec::with_capacity(self.n * self.dim);
        for i in 0..self.n {
            pts.extend_from_slice(self.state(i, step));
        }
        EmpiricalLaw::new(pts, self.dim)
    }

    /// Grid index of time `t`, if `t` is a grid point.
    pub fn grid_index(&self, t: S) -> Option<usize> {
        grid_index(&self.time_grid, t)
    }

    /// Ensemble restricted to every `factor`-th grid point.
    pub fn coarsened(&self, factor: usize) -> Result<Self, MeasureError> {
        if factor == 0 || self.steps() % factor != 0 {
            return Err(MeasureError::BadGrid(format!(
                "factor {factor} does not divide {}",
                self.steps()
            )));
        }
        let grid: Vec<S> = self.time_grid.iter().step_by(factor).copied().collect();
        let mut data = Vec::with_capacity(self.n * grid.len() * self.dim);
        for i in 0..self.n {
            for k in (0..=self.steps()).step_by(factor) {
                data.extend_from_slice(self.state(i, k));
            }
        }
        Self::new_unchecked(self.n, self.dim, grid, data)
    }

    /// Particles reordered so that output particle `i` is input `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let len = self.time_grid.len() * self.dim;
        let mut data = Vec::with_capacity(self.data.len());
        for &j in perm {
            data.extend_from_slice(&self.data[j * len..(j + 1) * len]);
        }
        Self {
            data,
            ..self.clone()
        }
    }
}

pub(crate) fn grid_index<S: Scalar>(grid: &[S], t: S) -> Option<usize> {
    let horizon = *grid.last()?;
    let tol = S::lit(1e-9) * S::one().max(horizon.abs());
    let pos = grid.partition_point(|&g| g < t - tol);
    (pos < grid.len() && (grid[pos] - t).abs() <= tol).then_some(pos)
}

pub(crate) fn same_grid<S: Scalar>(a: &[S], b: &[S]) -> bool {
    let tol = S::lit(1e-12).max(S::epsilon() * S::lit(16.0));
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(&x, &y)| (x - y).abs() <= tol * S::one().max(x.abs()))
}
