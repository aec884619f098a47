//! Probabilistic PCA on Euclidean data.
//!
//! The model is x = μ + Wz + ε with z ~ N(0, I_d) and ε ~ N(0, σ²I_D), so
//! that x ~ N(μ, C) with C = WWᵀ + σ²I_D. The maximum-likelihood estimate is
//! available in closed form from the leading eigenpairs of the sample
//! covariance; the EM fixed point reaches the same C iteratively.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Error, Result};
use crate::linalg::{
    center_rows, covariance_about, log_det_spd, sample_mean_cov, spd_inverse, symmetrize, trace,
    EigenPair,
};

/// Relative positive-definiteness threshold, scaled by tr(S)/D.
pub const PD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PpcaModel {
    pub mu: DVector<f64>,
    /// D×d loading matrix.
    pub w: DMatrix<f64>,
    pub sigma2: f64,
}

/// Gaussian posterior of the latent variable given one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LatentPosterior {
    /// E[zzᵀ | x] = Cov + mean·meanᵀ.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.cov + &self.mean * self.mean.transpose()
    }
}

impl PpcaModel {
    pub fn new(mu: DVector<f64>, w: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let (big_d, d) = w.shape();
        if mu.len() != big_d {
            return Err(Error::DimensionMismatch {
                expected: big_d,
                got: mu.len(),
            });
        }
        if d == 0 || d >= big_d {
            return Err(invalid(format!(
                "latent dimension must satisfy 1 <= d < D, got d={d}, D={big_d}"
            )));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(invalid(format!(
                "noise variance must be positive, got {sigma2}"
            )));
        }
        Ok(Self { mu, w, sigma2 })
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    /// M = WᵀW + σ²I_d.
    pub fn m_matrix(&self) -> DMatrix<f64> {
        let d = self.latent_dim();
        self.w.transpose() * &self.w + DMatrix::identity(d, d) * self.sigma2
    }

    /// C = WWᵀ + σ²I_D.
    pub fn covariance(&self) -> DMatrix<f64> {
        let big_d = self.dim();
        let mut c = &self.w * self.w.transpose() + DMatrix::identity(big_d, big_d) * self.sigma2;
        symmetrize(&mut c);
        c
    }

    /// M⁻¹Wᵀ, the linear map from centred observations to posterior means.
    pub fn projection(&self) -> Result<DMatrix<f64>> {
        Ok(spd_inverse(&self.m_matrix())? * self.w.transpose())
    }

    /// z | x ~ N(M⁻¹Wᵀ(x − μ), σ²M⁻¹).
    pub fn latent_posterior(&self, x: &DVector<f64>) -> Result<LatentPosterior> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let m_inv = spd_inverse(&self.m_matrix())?;
        let mean = &m_inv * self.w.transpose() * (x - &self.mu);
        Ok(LatentPosterior {
            mean,
            cov: m_inv * self.sigma2,
        })
    }

    /// Posterior means for every row of `x` (N×d).
    pub fn scores(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        let proj = self.projection()?;
        Ok(center_rows(x, &self.mu) * proj.transpose())
    }

    /// μ + W·score for every row of `scores`.
    pub fn reconstruct(&self, scores: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if scores.ncols() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                got: scores.ncols(),
            });
        }
        let mut x = scores * self.w.transpose();
        for mut row in x.row_iter_mut() {
            row += self.mu.transpose();
        }
        Ok(x)
    }
}

/// Closed-form MLE from the rows of `x`.
pub fn ppca_closed_form(x: &DMatrix<f64>, d: usize) -> Result<PpcaModel> {
    let (mu, s) = sample_mean_cov(x)?;
    closed_form_from_cov(mu, &s, d)
}

/// Closed-form MLE for a given mean and covariance:
/// σ̂² = mean of the D−d smallest eigenvalues, Ŵ = U_d(Λ_d − σ̂²I)^{1/2}.
pub fn closed_form_from_cov(mu: DVector<f64>, s: &DMatrix<f64>, d: usize) -> Result<PpcaModel> {
    let big_d = s.nrows();
    if d == 0 || d >= big_d {
        return Err(invalid(format!(
            "latent dimension must satisfy 1 <= d < D, got d={d}, D={big_d}"
        )));
    }
    let eig = EigenPair::of_symmetric(s)?;
    let floor = PD_TOL * (trace(s) / big_d as f64).abs();
    let sigma2 = eig.values.rows(d, big_d - d).sum() / (big_d - d) as f64;
    if !(sigma2 > floor) {
        return Err(numerical(format!(
            "noise variance {sigma2} is not positive: data lie in a {d}-dimensional subspace"
        )));
    }
    if let Some(i) = (0..d).find(|&i| eig.values[i] - sigma2 <= floor) {
        return Err(Error::DegenerateComponent {
            index: i + 1,
            eigenvalue: eig.values[i],
            noise: sigma2,
        });
    }
    let mut w = eig.vectors.columns(0, d).clone_owned();
    for (t, mut col) in w.column_iter_mut().enumerate() {
        col *= (eig.values[t] - sigma2).sqrt();
    }
    PpcaModel::new(mu, w, sigma2)
}

/// −(N/2)[D log 2π + log det C + tr(C⁻¹S)], S taken about the model mean.
pub fn ppca_loglik(x: &DMatrix<f64>, model: &PpcaModel) -> Result<f64> {
    if x.ncols() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: x.ncols(),
        });
    }
    let s = covariance_about(x, &model.mu);
    loglik_from_cov(&s, x.nrows(), model)
}

pub fn loglik_from_cov(s: &DMatrix<f64>, n: usize, model: &PpcaModel) -> Result<f64> {
    let c = model.covariance();
    let big_d = model.dim() as f64;
    let log_det = log_det_spd(&c)?;
    let c_inv = spd_inverse(&c)?;
    let tr = (c_inv * s).trace();
    Ok(-0.5 * n as f64 * (big_d * std::f64::consts::TAU.ln() + log_det + tr))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    /// Relative change in log-likelihood below which iteration stops; 0 runs
    /// all `max_iter` updates.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PpcaEmFit {
    pub model: PpcaModel,
    /// Log-likelihood before the first update and after every update.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// One EM update on covariance `s`:
/// W̃ = SW(σ²I + M⁻¹WᵀSW)⁻¹, σ̃² = tr(S − SWM⁻¹W̃ᵀ)/D.
pub fn em_step(s: &DMatrix<f64>, w: &DMatrix<f64>, sigma2: f64) -> Result<(DMatrix<f64>, f64)> {
    let (big_d, d) = w.shape();
    if s.shape() != (big_d, big_d) {
        return Err(Error::DimensionMismatch {
            expected: big_d,
            got: s.nrows(),
        });
    }
    let m = w.transpose() * w + DMatrix::identity(d, d) * sigma2;
    let m_inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| numerical("M = WᵀW + σ²I is singular"))?;
    let sw = s * w;
    let inner = DMatrix::identity(d, d) * sigma2 + &m_inv * w.transpose() * &sw;
    let inner_inv = inner
        .try_inverse()
        .ok_or_else(|| numerical("σ²I + M⁻¹WᵀSW is singular"))?;
    let w_new = &sw * inner_inv;
    let sigma2_new = (s - &sw * &m_inv * w_new.transpose()).trace() / big_d as f64;
    Ok((w_new, sigma2_new))
}

/// EM iterations from `init` until the relative log-likelihood change drops
/// below `opts.tol`. The mean is fixed at the sample mean.
pub fn ppca_em(
    x: &DMatrix<f64>,
    d: usize,
    init: &PpcaModel,
    opts: &EmOptions,
) -> Result<PpcaEmFit> {
    let (mu, s) = sample_mean_cov(x)?;
    if init.dim() != x.ncols() || init.latent_dim() != d {
        return Err(invalid(format!(
            "initial model has shape {}x{}, expected {}x{d}",
            init.dim(),
            init.latent_dim(),
            x.ncols()
        )));
    }
    em_on_cov(mu, &s, x.nrows(), init, opts)
}

pub(crate) fn em_on_cov(
    mu: DVector<f64>,
    s: &DMatrix<f64>,
    n: usize,
    init: &PpcaModel,
    opts: &EmOptions,
) -> Result<PpcaEmFit> {
    let mut model = PpcaModel::new(mu, init.w.clone(), init.sigma2)?;
    let mut trace = vec![loglik_from_cov(s, n, &model)?];
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let (w, sigma2) = em_step(s, &model.w, model.sigma2)?;
        model = PpcaModel::new(model.mu, w, sigma2)?;
        let ll = loglik_from_cov(s, n, &model)?;
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if (ll - prev).abs() < opts.tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(PpcaEmFit {
        model,
        trace,
        converged,
    })
}
