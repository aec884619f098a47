//! Multivariate wrapped normal distribution on the D-torus and its
//! classification-EM estimator.
//!
//! An observation y ∈ [0, 2π)^D is the image of x ~ N(μ, Σ) under
//! coordinate-wise reduction modulo 2π. Its density is the lattice sum
//! Σ_k φ(y + 2πk | μ, Σ), truncated to k ∈ {−J..J}^D. The classification EM
//! treats the winding numbers k_j as parameters: each iteration assigns every
//! observation its most likely winding (C-step) and then refits μ, Σ on the
//! unwrapped points (M-step).

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Error, Result};
use crate::lattice::{LatticeMin, LatticeSpec, WrapQuadratic, DENSITY_SLACK};
use crate::linalg::{covariance_about, log_det_spd, trace, EigenPair};

/// Relative ridge added to a singular covariance estimate.
pub const RIDGE: f64 = 1e-8;

/// Smallest admissible eigenvalue of a covariance, relative to tr(Σ)/D.
pub const PD_THRESHOLD: f64 = 1e-10;

/// Reduces a finite angle into [0, 2π).
pub fn wrap_angle(x: f64) -> f64 {
    let w = x - TAU * (x / TAU).floor();
    // x slightly below a multiple of 2π can round up to exactly 2π
    if w >= TAU {
        0.0
    } else {
        w
    }
}

pub fn wrap(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite entry at flat index {pos}")));
    }
    Ok(x.map(wrap_angle))
}

pub fn wrap_vector(x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite entry in vector"));
    }
    Ok(x.map(wrap_angle))
}

/// N×D observations on the torus, every entry in [0, 2π).
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMatrix {
    data: DMatrix<f64>,
}

impl AngleMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(invalid(
                "angle matrix must have at least one row and column",
            ));
        }
        if let Some((idx, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..TAU).contains(*v))
        {
            let (row, col) = (idx % data.nrows(), idx / data.nrows());
            return Err(invalid(format!(
                "angle {v} at row {row}, column {col} is outside [0, 2pi)"
            )));
        }
        Ok(Self { data })
    }

    /// Wraps arbitrary finite reals onto the torus.
    pub fn from_unwrapped(x: &DMatrix<f64>) -> Result<Self> {
        Self::new(wrap(x)?)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn row_vec(&self, j: usize) -> Vec<f64> {
        self.data.row(j).iter().copied().collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.nrows()).map(|j| self.row_vec(j)).collect()
    }
}

/// Winding numbers k_j relating observations to unwrapped points
/// x_j = y_j + 2πk_j, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrapIndices {
    nrows: usize,
    ncols: usize,
    radius: u32,
    k: Vec<i32>,
}

impl WrapIndices {
    pub fn zeros(nrows: usize, ncols: usize, radius: u32) -> Self {
        Self {
            nrows,
            ncols,
            radius,
            k: vec![0; nrows * ncols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<i32>>, radius: u32) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(invalid("winding rows have unequal lengths"));
        }
        let k: Vec<i32> = rows.into_iter().flatten().collect();
        if let Some(bad) = k.iter().find(|v| v.unsigned_abs() > radius) {
            return Err(invalid(format!(
                "winding number {bad} exceeds radius {radius}"
            )));
        }
        Ok(Self {
            nrows,
            ncols,
            radius,
            k,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn row(&self, j: usize) -> &[i32] {
        &self.k[j * self.ncols..(j + 1) * self.ncols]
    }

    pub fn set_row(&mut self, j: usize, k: &[i32]) {
        self.k[j * self.ncols..(j + 1) * self.ncols].copy_from_slice(k);
    }

    pub fn get(&self, j: usize, i: usize) -> i32 {
        self.k[j * self.ncols + i]
    }

    pub fn is_zero(&self) -> bool {
        self.k.iter().all(|&v| v == 0)
    }

    /// Shifts every row by the same integer vector.
    pub(crate) fn shift(&mut self, by: &[i32]) {
        for row in self.k.chunks_mut(self.ncols) {
            for (v, s) in row.iter_mut().zip(by) {
                *v += s;
            }
        }
    }

    pub(crate) fn within_radius(&self) -> bool {
        self.k.iter().all(|v| v.unsigned_abs() <= self.radius)
    }

    /// The unwrapped points y_j + 2πk_j.
    pub fn unwrap(&self, y: &AngleMatrix) -> Result<DMatrix<f64>> {
        if y.nrows() != self.nrows || y.ncols() != self.ncols {
            return Err(invalid(format!(
                "winding matrix is {}x{} but data is {}x{}",
                self.nrows,
                self.ncols,
                y.nrows(),
                y.ncols()
            )));
        }
        Ok(DMatrix::from_fn(self.nrows, self.ncols, |j, i| {
            y.data()[(j, i)] + TAU * self.get(j, i) as f64
        }))
    }
}

/// Parameters of a D-variate wrapped normal: unwrapped mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct WnParams {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl WnParams {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(invalid(format!(
                "covariance is {:?} but mean has length {d}",
                sigma.shape()
            )));
        }
        if !is_positive_definite(&sigma)? {
            return Err(numerical("covariance is not positive definite"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn is_positive_definite(sigma: &DMatrix<f64>) -> Result<bool> {
    let d = sigma.nrows() as f64;
    let scale = (trace(sigma) / d).max(0.0);
    let eig = EigenPair::of_symmetric(sigma)?;
    let smallest = eig.values[eig.dim() - 1];
    Ok(smallest > 0.0 && smallest > PD_THRESHOLD * scale)
}

/// Precomputed wrapped normal for repeated per-observation evaluation.
#[derive(Debug, Clone)]
pub struct WrappedNormal {
    params: WnParams,
    quad: WrapQuadratic,
    lattice: LatticeSpec,
    log_norm: f64,
}

impl WrappedNormal {
    pub fn new(params: WnParams, lattice: LatticeSpec) -> Result<Self> {
        let d = params.dim();
        lattice.check(d)?;
        let quad = WrapQuadratic::from_covariance(&params.sigma)?;
        let log_norm = -0.5 * (d as f64 * TAU.ln() + log_det_spd(&params.sigma)?);
        Ok(Self {
            params,
            quad,
            lattice,
            log_norm,
        })
    }

    pub fn params(&self) -> &WnParams {
        &self.params
    }

    fn offset(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.params.mu.iter())
            .map(|(a, m)| a - m)
            .collect()
    }

    /// log φ(y + 2πk | μ, Σ).
    pub fn log_term(&self, y: &[f64], k: &[i32]) -> f64 {
        self.log_norm - 0.5 * self.quad.eval(&self.offset(y), k)
    }

    /// Log of the truncated lattice sum, accumulated with a max shift.
    pub fn log_density(&self, y: &[f64]) -> f64 {
        let b = self.offset(y);
        let mut qs = Vec::new();
        let qmin = self
            .quad
            .for_each_within(&b, self.lattice.radius, DENSITY_SLACK, |_, q| qs.push(q));
        let shifted: f64 = qs.iter().map(|q| (-0.5 * (q - qmin)).exp()).sum();
        self.log_norm - 0.5 * qmin + shifted.ln()
    }

    /// Posterior weights v_{jk} over the lattice (terms below exp(−30) of the
    /// largest are omitted).
    pub fn estep_weights(&self, y: &[f64]) -> Vec<(Vec<i32>, f64)> {
        let b = self.offset(y);
        let mut terms = Vec::new();
        let qmin = self
            .quad
            .for_each_within(&b, self.lattice.radius, DENSITY_SLACK, |k, q| {
                terms.push((k.to_vec(), q));
            });
        let total: f64 = terms.iter().map(|(_, q)| (-0.5 * (q - qmin)).exp()).sum();
        let mut out: Vec<_> = terms
            .into_iter()
            .map(|(k, q)| (k, (-0.5 * (q - qmin)).exp() / total))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// The most likely winding (C-step), ties to the lexicographically
    /// smallest k.
    pub fn classify(&self, y: &[f64]) -> LatticeMin {
        self.quad.argmin(&self.offset(y), self.lattice.radius)
    }
}

/// log Σ_{k ∈ {−J..J}^D} φ(y + 2πk | μ, Σ).
pub fn wn_log_density(y: &[f64], params: &WnParams, lattice: LatticeSpec) -> Result<f64> {
    if y.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: y.len(),
        });
    }
    Ok(WrappedNormal::new(params.clone(), lattice)?.log_density(y))
}

/// Σ_j log φ(y_j + 2πk_j | μ, Σ).
pub fn classification_loglik(y: &AngleMatrix, k: &WrapIndices, params: &WnParams) -> Result<f64> {
    let x = k.unwrap(y)?;
    gaussian_loglik(&x, params)
}

fn gaussian_loglik(x: &DMatrix<f64>, params: &WnParams) -> Result<f64> {
    let (n, d) = x.shape();
    let quad = WrapQuadratic::from_covariance(&params.sigma)?;
    let zero = vec![0; d];
    let log_norm = -0.5 * (d as f64 * TAU.ln() + log_det_spd(&params.sigma)?);
    let mut total = 0.0;
    for j in 0..n {
        let b: Vec<f64> = (0..d).map(|i| x[(j, i)] - params.mu[i]).collect();
        total += log_norm - 0.5 * quad.eval(&b, &zero);
    }
    Ok(total)
}

/// Coordinate-wise circular mean, with a diagonal covariance from the
/// circular standard deviation √(−2 ln R̄).
pub fn circular_init(y: &AngleMatrix) -> WnParams {
    let d = y.ncols();
    let n = y.nrows() as f64;
    let mut mu = DVector::zeros(d);
    let mut var = DVector::zeros(d);
    for i in 0..d {
        let col = y.data().column(i);
        let s = col.iter().map(|v| v.sin()).sum::<f64>() / n;
        let c = col.iter().map(|v| v.cos()).sum::<f64>() / n;
        mu[i] = wrap_angle(s.atan2(c));
        let r = s.hypot(c).clamp(1e-12, 1.0);
        var[i] = (-2.0 * r.ln()).clamp(1e-6, 4.0 * PI * PI);
    }
    WnParams {
        mu,
        sigma: DMatrix::from_diagonal(&var),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CemOptions {
    pub lattice: LatticeSpec,
    /// Stop once the classification log-likelihood improves by less than this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CemOptions {
    fn default() -> Self {
        Self {
            lattice: LatticeSpec::default(),
            tol: 1e-9,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CemFit {
    pub params: WnParams,
    pub k: WrapIndices,
    /// Classification log-likelihood after each M-step.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Set when a ridge had to be added to a singular covariance estimate.
    pub regularized: bool,
}

impl CemFit {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn final_loglik(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Classification EM for (μ, Σ, 𝒦) under the wrapped normal model.
pub fn cem_fit(y: &AngleMatrix, init: &WnParams, opts: &CemOptions) -> Result<CemFit> {
    let (n, d) = (y.nrows(), y.ncols());
    if init.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: init.dim(),
        });
    }
    if n <= d {
        return Err(invalid(format!(
            "CEM needs more rows than columns (N={n}, D={d})"
        )));
    }
    if opts.lattice.radius < 1 {
        return Err(invalid("CEM needs a lattice radius of at least 1"));
    }
    opts.lattice.check(d)?;

    let rows = y.rows();
    let mut params = init.clone();
    let mut k = WrapIndices::zeros(n, d, opts.lattice.radius);
    let mut trace = Vec::new();
    let mut regularized = false;
    let mut converged = false;

    for iter in 0..opts.max_iter {
        // C-step
        let wn = WrappedNormal::new(params.clone(), opts.lattice)?;
        let mut changed = false;
        for (j, row) in rows.iter().enumerate() {
            let best = wn.classify(row);
            if best.k.as_slice() != k.row(j) {
                changed = true;
                k.set_row(j, &best.k);
            }
        }
        if iter > 0 && !changed {
            converged = true;
            break;
        }

        // M-step
        let x = k.unwrap(y)?;
        let mu = crate::linalg::column_means(&x);
        let (sigma, ridged) = regularize(covariance_about(&x, &mu))?;
        regularized |= ridged;
        params = WnParams { mu, sigma };
        let ll = gaussian_loglik(&x, &params)?;
        let improvement = trace.last().map(|prev| ll - prev);
        trace.push(ll);
        if let Some(delta) = improvement {
            if delta < opts.tol {
                converged = true;
                break;
            }
        }
    }

    Ok(CemFit {
        params,
        k,
        trace,
        converged,
        regularized,
    })
}

/// Adds ε·tr(Σ)/D·I (at least ε) to a numerically singular covariance.
pub fn regularize(mut sigma: DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if is_positive_definite(&sigma)? {
        return Ok((sigma, false));
    }
    let d = sigma.nrows();
    let ridge = RIDGE * (trace(&sigma) / d as f64).max(1.0);
    for i in 0..d {
        sigma[(i, i)] += ridge;
    }
    Ok((sigma, true))
}
