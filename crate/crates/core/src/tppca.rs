//! Torus probabilistic PCA.
//!
//! Observations y ∈ [0, 2π)^D are modelled as y = x mod 2π with
//! x = μ + Wz + ε the PPCA latent model. Estimation alternates two steps:
//!
//! 1. with W, σ² held fixed, a classification EM over (μ, 𝒦): each
//!    observation takes the winding k_j maximising the expected
//!    complete-data objective Γ, then μ becomes the mean of the unwrapped
//!    points x̂_j = y_j + 2πk_j;
//! 2. with μ, 𝒦 held fixed, one PPCA EM update of (W, σ²) on the x̂_j.
//!
//! The alternation starts from a wrapped-normal CEM fit with unrestricted
//! covariance followed by the closed-form PPCA solution on its covariance,
//! and stops when the observed-data wrapped normal log-likelihood settles.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{LatticeSpec, WrapQuadratic};
use crate::linalg::{column_means, covariance_about, spd_inverse};
use crate::ppca::{closed_form_from_cov, em_step, loglik_from_cov, PpcaModel};
use crate::wrapped_normal::{
    cem_fit, circular_init, wrap, AngleMatrix, CemFit, CemOptions, WnParams, WrapIndices,
    WrappedNormal,
};

/// Largest drop in observed log-likelihood between outer iterations that is
/// still treated as ascent. Hard winding assignments can cause tiny
/// decreases.
pub const ASCENT_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Step2Mode {
    /// One EM update of (W, σ²) per outer iteration.
    Single,
    /// Iterate the EM update until the relative PPCA log-likelihood change on
    /// the unwrapped data drops below `tol`.
    Converge { tol: f64, max_iter: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TppcaConfig {
    pub d: usize,
    pub lattice: LatticeSpec,
    /// Relative change of the observed log-likelihood that ends the
    /// alternation.
    pub outer_tol: f64,
    pub outer_max_iter: usize,
    /// Settings of the initial wrapped-normal CEM.
    pub cem: CemOptions,
    /// Cap on C/M sweeps inside one Step 1.
    pub step1_max_iter: usize,
    pub step2: Step2Mode,
    /// Recorded for provenance; every tie in the estimator is broken
    /// deterministically, so the fit does not draw random numbers.
    pub seed: Option<u64>,
}

impl TppcaConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            lattice: LatticeSpec::default(),
            outer_tol: 1e-7,
            outer_max_iter: 500,
            cem: CemOptions::default(),
            step1_max_iter: 100,
            step2: Step2Mode::Single,
            seed: None,
        }
    }

    pub fn with_lattice(mut self, lattice: LatticeSpec) -> Self {
        self.lattice = lattice;
        self.cem.lattice = lattice;
        self
    }

    pub fn validate(&self, big_d: usize) -> Result<()> {
        if self.d == 0 || self.d >= big_d {
            return Err(invalid(format!(
                "latent dimension must satisfy 1 <= d < D, got d={}, D={big_d}",
                self.d
            )));
        }
        if !(self.outer_tol > 0.0) {
            return Err(invalid("outer tolerance must be positive"));
        }
        self.lattice.check(big_d)
    }
}

/// Starting values: CEM estimates under an unrestricted covariance and the
/// closed-form PPCA parameters of that covariance.
#[derive(Debug, Clone)]
pub struct TppcaInit {
    pub model: PpcaModel,
    pub k: WrapIndices,
    /// Covariance of the unwrapped points about μ̂₀.
    pub s: DMatrix<f64>,
    pub cem: CemFit,
}

pub fn tppca_init(y: &AngleMatrix, d: usize, cem: &CemOptions) -> Result<TppcaInit> {
    let big_d = y.ncols();
    if d == 0 || d >= big_d {
        return Err(invalid(format!(
            "latent dimension must satisfy 1 <= d < D, got d={d}, D={big_d}"
        )));
    }
    let fit = cem_fit(y, &circular_init(y), cem)?;
    let x = fit.k.unwrap(y)?;
    let mu = column_means(&x);
    let s = covariance_about(&x, &mu);
    let model = closed_form_from_cov(mu, &s, d)?;
    Ok(TppcaInit {
        model,
        k: fit.k.clone(),
        s,
        cem: fit,
    })
}

/// Expected complete-data objective Γ(μ, W, σ², k_j | y_j) for fixed
/// (W, σ²).
///
/// With r = y + 2πk − μ and m = M⁻¹Wᵀr the posterior mean,
/// Γ = −D ln σ² − tr E[zzᵀ] − |r|²/σ² − tr(W E[zzᵀ] Wᵀ)/σ² + 2rᵀWm/σ²,
/// which equals a constant minus |m|² + |r − Wm|²/σ², a positive definite
/// quadratic form in r. The C-step therefore reduces to a lattice
/// minimisation of that form.
#[derive(Debug, Clone)]
pub struct ExpectedObjective {
    quad: WrapQuadratic,
    constant: f64,
}

impl ExpectedObjective {
    pub fn new(model: &PpcaModel) -> Result<Self> {
        let big_d = model.dim();
        let m_inv = spd_inverse(&model.m_matrix())?;
        let proj = &m_inv * model.w.transpose();
        let resid = DMatrix::identity(big_d, big_d) - &model.w * &proj;
        let mut a = proj.transpose() * &proj + resid.transpose() * &resid / model.sigma2;
        crate::linalg::symmetrize(&mut a);
        let quad = WrapQuadratic::new(&a)?;
        let constant = -(big_d as f64) * model.sigma2.ln()
            - model.sigma2 * m_inv.trace()
            - (&model.w * &m_inv * model.w.transpose()).trace();
        Ok(Self { quad, constant })
    }

    /// Γ for one observation, winding and mean.
    pub fn value(&self, y: &[f64], k: &[i32], mu: &DVector<f64>) -> f64 {
        let b: Vec<f64> = y.iter().zip(mu.iter()).map(|(a, m)| a - m).collect();
        self.constant - self.quad.eval(&b, k)
    }

    fn best_winding(&self, y: &[f64], mu: &DVector<f64>, radius: u32) -> Vec<i32> {
        let b: Vec<f64> = y.iter().zip(mu.iter()).map(|(a, m)| a - m).collect();
        self.quad.argmin(&b, radius).k
    }
}

/// One classification sweep of Step 1: every k_j maximises Γ at the current
/// μ (ties to the lexicographically smallest k), then μ is the mean of the
/// unwrapped points. The lattice radius is taken from `k`.
pub fn tppca_step1(
    y: &AngleMatrix,
    model: &PpcaModel,
    k: &WrapIndices,
) -> Result<(DVector<f64>, WrapIndices)> {
    if model.dim() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: y.ncols(),
            got: model.dim(),
        });
    }
    let objective = ExpectedObjective::new(model)?;
    step1_with(y, &objective, &model.mu, k)
}

fn step1_with(
    y: &AngleMatrix,
    objective: &ExpectedObjective,
    mu: &DVector<f64>,
    k: &WrapIndices,
) -> Result<(DVector<f64>, WrapIndices)> {
    let radius = k.radius();
    LatticeSpec::new(radius).check(y.ncols())?;
    let mut next = WrapIndices::zeros(y.nrows(), y.ncols(), radius);
    for j in 0..y.nrows() {
        let row = y.row_vec(j);
        next.set_row(j, &objective.best_winding(&row, mu, radius));
    }
    let x = next.unwrap(y)?;
    Ok((column_means(&x), next))
}

/// One PPCA EM update of (W, σ²) on the unwrapped points about `mu`.
pub fn tppca_step2(
    x_hat: &DMatrix<f64>,
    mu: &DVector<f64>,
    w_prev: &DMatrix<f64>,
    sigma2_prev: f64,
) -> Result<(DMatrix<f64>, f64)> {
    if x_hat.ncols() != mu.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            got: x_hat.ncols(),
        });
    }
    let s = covariance_about(x_hat, mu);
    em_step(&s, w_prev, sigma2_prev)
}

/// Σ_j log of the truncated wrapped normal density with Σ = WWᵀ + σ²I.
pub fn observed_loglik(y: &AngleMatrix, model: &PpcaModel, lattice: LatticeSpec) -> Result<f64> {
    let params = WnParams {
        mu: model.mu.clone(),
        sigma: model.covariance(),
    };
    let wn = WrappedNormal::new(params, lattice)?;
    Ok((0..y.nrows()).map(|j| wn.log_density(&y.row_vec(j))).sum())
}

#[derive(Debug, Clone)]
pub struct TppcaFit {
    pub model: PpcaModel,
    pub k: WrapIndices,
    /// Unwrapped estimates x̂_j = y_j + 2πk_j (N×D).
    pub x_hat: DMatrix<f64>,
    /// Posterior latent means of the x̂_j (N×d).
    pub scores: DMatrix<f64>,
    /// Observed-data log-likelihood at the start and after each outer
    /// iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl TppcaFit {
    pub fn iterations(&self) -> usize {
        self.trace.len().saturating_sub(1)
    }

    pub fn final_loglik(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Largest decrease between consecutive trace entries (0 when ascending).
    pub fn max_descent(&self) -> f64 {
        self.trace
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }

    pub fn is_near_monotone(&self) -> bool {
        self.max_descent() <= ASCENT_SLACK
    }
}

/// Moves μ into [0, 2π) by shifting every winding by the same integer
/// vector, provided the windings stay inside the lattice.
fn canonicalize(mu: &mut DVector<f64>, k: &mut WrapIndices) {
    let shift: Vec<i32> = mu.iter().map(|m| (m / TAU).floor() as i32).collect();
    if shift.iter().all(|&s| s == 0) {
        return;
    }
    let neg: Vec<i32> = shift.iter().map(|s| -s).collect();
    let mut moved = k.clone();
    moved.shift(&neg);
    if moved.within_radius() {
        for (m, s) in mu.iter_mut().zip(&shift) {
            *m -= TAU * *s as f64;
        }
        *k = moved;
    }
}

pub fn tppca_fit(y: &AngleMatrix, cfg: &TppcaConfig) -> Result<TppcaFit> {
    let (n, big_d) = (y.nrows(), y.ncols());
    cfg.validate(big_d)?;
    if n <= big_d {
        return Err(invalid(format!(
            "need more rows than columns (N={n}, D={big_d})"
        )));
    }
    let cem = CemOptions {
        lattice: cfg.lattice,
        ..cfg.cem
    };
    let init = tppca_init(y, cfg.d, &cem)?;
    let mut model = init.model;
    let mut k = init.k;
    canonicalize(&mut model.mu, &mut k);

    let mut trace = vec![observed_loglik(y, &model, cfg.lattice)?];
    let mut converged = false;

    for _ in 0..cfg.outer_max_iter {
        // Step 1: classification EM over (μ, 𝒦) with W, σ² fixed.
        let objective = ExpectedObjective::new(&model)?;
        for _ in 0..cfg.step1_max_iter.max(1) {
            let (mut mu, mut next) = step1_with(y, &objective, &model.mu, &k)?;
            canonicalize(&mut mu, &mut next);
            let stable = next == k;
            model.mu = mu;
            k = next;
            if stable {
                break;
            }
        }

        // Step 2: PPCA EM update of (W, σ²) on the unwrapped points.
        let x_hat = k.unwrap(y)?;
        let s = covariance_about(&x_hat, &model.mu);
        match cfg.step2 {
            Step2Mode::Single => {
                let (w, sigma2) = em_step(&s, &model.w, model.sigma2)?;
                model = PpcaModel::new(model.mu, w, sigma2)?;
            }
            Step2Mode::Converge { tol, max_iter } => {
                let mut prev = loglik_from_cov(&s, n, &model)?;
                for _ in 0..max_iter {
                    let (w, sigma2) = em_step(&s, &model.w, model.sigma2)?;
                    model = PpcaModel::new(model.mu, w, sigma2)?;
                    let ll = loglik_from_cov(&s, n, &model)?;
                    let done = (ll - prev).abs() <= tol * prev.abs().max(1.0);
                    prev = ll;
                    if done {
                        break;
                    }
                }
            }
        }

        let ll = observed_loglik(y, &model, cfg.lattice)?;
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if (ll - prev).abs() <= cfg.outer_tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let (k, scores) = tppca_scores(&model, y, k.radius())?;
    let x_hat = k.unwrap(y)?;
    Ok(TppcaFit {
        model,
        k,
        x_hat,
        scores,
        trace,
        converged,
    })
}

/// Windings maximising Γ under `model` for every row of `y`, and the
/// posterior-mean scores of the unwrapped points.
pub fn tppca_scores(
    model: &PpcaModel,
    y: &AngleMatrix,
    radius: u32,
) -> Result<(WrapIndices, DMatrix<f64>)> {
    if model.dim() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: y.ncols(),
        });
    }
    LatticeSpec::new(radius).check(y.ncols())?;
    let objective = ExpectedObjective::new(model)?;
    let mut k = WrapIndices::zeros(y.nrows(), y.ncols(), radius);
    for j in 0..y.nrows() {
        k.set_row(j, &objective.best_winding(&y.row_vec(j), &model.mu, radius));
    }
    let scores = model.scores(&k.unwrap(y)?)?;
    Ok((k, scores))
}

/// X_recons = μ̂ + Ŵ·scores row-wise, and its image on the torus.
pub fn tppca_reconstruct(fit: &TppcaFit) -> Result<(DMatrix<f64>, AngleMatrix)> {
    let x = fit.model.reconstruct(&fit.scores)?;
    let y = AngleMatrix::new(wrap(&x)?)?;
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_1d(mu: f64, w: f64, sigma2: f64) -> PpcaModel {
        PpcaModel::new(
            DVector::from_vec(vec![mu, 0.0]),
            DMatrix::from_row_slice(2, 1, &[w, 0.0]),
            sigma2,
        )
        .unwrap()
    }

    #[test]
    fn step1_unwraps_towards_mean() {
        let y = AngleMatrix::new(DMatrix::from_row_slice(1, 2, &[0.1, 0.0])).unwrap();
        let model = model_1d(6.0, 0.01, 0.01);
        let k = WrapIndices::zeros(1, 2, 2);
        let (mu, k) = tppca_step1(&y, &model, &k).unwrap();
        assert_eq!(k.row(0), &[1, 0]);
        assert!((mu[0] - (TAU + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn step1_interior_data_keeps_zero_windings() {
        let y = AngleMatrix::new(DMatrix::from_row_slice(
            3,
            2,
            &[3.0, 3.1, 3.2, 2.9, 3.1, 3.0],
        ))
        .unwrap();
        let model = PpcaModel::new(
            DVector::from_vec(vec![3.1, 3.0]),
            DMatrix::from_row_slice(2, 1, &[0.1, 0.1]),
            0.05,
        )
        .unwrap();
        let (mu, k) = tppca_step1(&y, &model, &WrapIndices::zeros(3, 2, 1)).unwrap();
        assert!(k.is_zero());
        assert!((mu[0] - 3.1).abs() < 1e-12 && (mu[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn step2_keeps_sigma_positive() {
        let x = DMatrix::from_fn(30, 3, |i, j| {
            ((i * 5 + j * 11) as f64 * 0.37).sin() * (j + 1) as f64
        });
        let mu = column_means(&x);
        let w = DMatrix::from_row_slice(3, 1, &[0.5, 0.2, 0.1]);
        let (_, s2) = tppca_step2(&x, &mu, &w, 0.3).unwrap();
        assert!(s2 > 0.0);
    }

    #[test]
    fn config_rejects_bad_dimension() {
        let y = AngleMatrix::new(DMatrix::from_element(10, 1, 1.0)).unwrap();
        assert!(tppca_fit(&y, &TppcaConfig::new(1)).is_err());
    }

    #[test]
    fn canonicalize_shifts_mean_and_windings() {
        let mut mu = DVector::from_vec(vec![TAU + 0.5, -0.2]);
        let mut k = WrapIndices::from_rows(vec![vec![1, 0], vec![1, -1]], 2).unwrap();
        canonicalize(&mut mu, &mut k);
        assert!((mu[0] - 0.5).abs() < 1e-12);
        assert!((mu[1] - (TAU - 0.2)).abs() < 1e-12);
        assert_eq!(k.row(0), &[0, 1]);
        assert_eq!(k.row(1), &[0, 0]);
    }
}
