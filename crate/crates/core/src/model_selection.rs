//! Choosing the latent dimension: likelihood-ratio tests against the
//! saturated model (type 1) and against d+1 components (type 2), the
//! Kaiser-Guttman rule, and Krzanowski's leave-out SVD cross-validation.
//!
//! Torus data are first unwrapped by a wrapped-normal CEM fit with an
//! unrestricted covariance; every selector then works on the unwrapped
//! points.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, numerical, Error, Result};
use crate::linalg::{center_rows, cholesky, column_means, covariance_about, EigenPair};
use crate::ppca::{closed_form_from_cov, PpcaModel};
use crate::wrapped_normal::{cem_fit, circular_init, AngleMatrix, CemOptions};

/// Tolerance below which a negative test statistic is treated as zero.
pub const STAT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub d: usize,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// The raw statistic was negative and has been set to zero.
    pub clamped: bool,
}

/// Degrees of freedom of the type 1 test: D(D+1)/2 − (Dd + 1 − d(d−1)/2).
pub fn lrt1_df(big_d: usize, d: usize) -> i64 {
    let (big_d, d) = (big_d as i64, d as i64);
    big_d * (big_d + 1) / 2 - (big_d * d + 1 - d * (d - 1) / 2)
}

/// Degrees of freedom of the type 2 test: D − d.
pub fn lrt2_df(big_d: usize, d: usize) -> i64 {
    big_d as i64 - d as i64
}

/// Upper tail probability of the chi-square distribution.
pub fn chi2_sf(x: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(invalid("chi-square needs at least one degree of freedom"));
    }
    let dist = ChiSquared::new(df as f64).map_err(|e| numerical(e.to_string()))?;
    Ok(dist.sf(x.max(0.0)).clamp(0.0, 1.0))
}

/// U = nD(a − log g − 1) with a, g the arithmetic and geometric means of the
/// eigenvalues of Σ₀⁻¹S.
pub fn u_statistic(s: &DMatrix<f64>, sigma0: &DMatrix<f64>, n: usize) -> Result<f64> {
    let big_d = s.nrows();
    if s.shape() != sigma0.shape() || !s.is_square() {
        return Err(invalid("covariance shapes differ"));
    }
    // eigenvalues of Σ₀⁻¹S equal those of L⁻¹SL⁻ᵀ for Σ₀ = LLᵀ
    let l = cholesky(sigma0)?;
    let l_inv = l.try_inverse().ok_or_else(|| numerical("Σ₀ is singular"))?;
    let whitened = &l_inv * s * l_inv.transpose();
    let eig = EigenPair::of_symmetric(&whitened)?;
    if let Some(bad) = eig.values.iter().find(|v| **v <= 0.0) {
        return Err(numerical(format!(
            "eigenvalue {bad} of Σ₀⁻¹S is not positive"
        )));
    }
    let a = eig.values.mean();
    let log_g = eig.values.iter().map(|v| v.ln()).sum::<f64>() / big_d as f64;
    Ok(n as f64 * big_d as f64 * (a - log_g - 1.0))
}

fn clamp_stat(raw: f64) -> (f64, bool) {
    if raw < 0.0 {
        (0.0, raw < -STAT_TOL)
    } else {
        (raw, false)
    }
}

/// Goodness of fit of the d-component model against an unrestricted
/// covariance.
pub fn lrt_type1(s: &DMatrix<f64>, model: &PpcaModel, n: usize) -> Result<LrtResult> {
    let (big_d, d) = (model.dim(), model.latent_dim());
    if n <= big_d {
        return Err(invalid(format!("need n > D, got n={n}, D={big_d}")));
    }
    let df = lrt1_df(big_d, d);
    if df <= 0 {
        return Err(invalid(format!(
            "the {d}-component model is saturated for D={big_d}: no degrees of freedom"
        )));
    }
    let (statistic, clamped) = clamp_stat(u_statistic(s, &model.covariance(), n)?);
    Ok(LrtResult {
        d,
        statistic,
        df: df as usize,
        p_value: chi2_sf(statistic, df as usize)?,
        clamped,
    })
}

/// V_d = U_d − U_{d+1}, compared with χ²_{D−d}.
pub fn lrt_type2(
    s: &DMatrix<f64>,
    model_d: &PpcaModel,
    model_d1: &PpcaModel,
    n: usize,
) -> Result<LrtResult> {
    let (big_d, d) = (model_d.dim(), model_d.latent_dim());
    if model_d1.latent_dim() != d + 1 || model_d1.dim() != big_d {
        return Err(invalid("second model must have exactly one more component"));
    }
    if d + 1 >= big_d {
        return Err(invalid(format!(
            "type 2 test needs d + 1 < D, got d={d}, D={big_d}"
        )));
    }
    let u_d = u_statistic(s, &model_d.covariance(), n)?;
    let u_d1 = u_statistic(s, &model_d1.covariance(), n)?;
    let (statistic, clamped) = clamp_stat(u_d - u_d1);
    let df = lrt2_df(big_d, d) as usize;
    Ok(LrtResult {
        d,
        statistic,
        df,
        p_value: chi2_sf(statistic, df)?,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrtKind {
    Type1,
    Type2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtStep {
    pub d: usize,
    pub result: Option<LrtResult>,
    /// Why the test at this d could not be carried out.
    pub error: Option<String>,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtSelection {
    pub kind: LrtKind,
    pub alpha: f64,
    pub chosen_d: usize,
    /// Every testable d was rejected; `chosen_d` is D − 1.
    pub exhausted: bool,
    pub steps: Vec<LrtStep>,
}

/// Forward stepwise testing on a covariance: d = 1, 2, … until the null
/// hypothesis is not rejected at level `alpha`.
pub fn select_lrt_cov(
    mu: &DVector<f64>,
    s: &DMatrix<f64>,
    n: usize,
    alpha: f64,
    kind: LrtKind,
) -> Result<LrtSelection> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let big_d = s.nrows();
    if big_d < 2 {
        return Err(invalid("dimension selection needs at least two variables"));
    }
    let fit = |d: usize| closed_form_from_cov(mu.clone(), s, d);
    let mut steps = Vec::new();
    for d in 1..big_d.saturating_sub(1) {
        let outcome = match kind {
            LrtKind::Type1 => fit(d).and_then(|m| lrt_type1(s, &m, n)),
            LrtKind::Type2 => fit(d).and_then(|m| {
                let m1 = fit(d + 1)?;
                lrt_type2(s, &m, &m1, n)
            }),
        };
        match outcome {
            Ok(result) => {
                let rejected = result.p_value < alpha;
                steps.push(LrtStep {
                    d,
                    result: Some(result),
                    error: None,
                    rejected,
                });
                if !rejected {
                    return Ok(LrtSelection {
                        kind,
                        alpha,
                        chosen_d: d,
                        exhausted: false,
                        steps,
                    });
                }
            }
            Err(e) => steps.push(LrtStep {
                d,
                result: None,
                error: Some(e.to_string()),
                rejected: false,
            }),
        }
    }
    Ok(LrtSelection {
        kind,
        alpha,
        chosen_d: big_d - 1,
        exhausted: true,
        steps,
    })
}

/// Forward stepwise LRT on Euclidean data.
pub fn select_lrt(x: &DMatrix<f64>, alpha: f64, kind: LrtKind) -> Result<LrtSelection> {
    let (mu, s) = crate::linalg::sample_mean_cov(x)?;
    select_lrt_cov(&mu, &s, x.nrows(), alpha, kind)
}

/// Unwrapped points from a wrapped-normal CEM fit with unrestricted
/// covariance.
pub fn unwrap_for_selection(y: &AngleMatrix, cem: &CemOptions) -> Result<DMatrix<f64>> {
    let fit = cem_fit(y, &circular_init(y), cem)?;
    fit.k.unwrap(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaiserGuttman {
    /// Correlation-matrix eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    pub raw_count: usize,
    pub chosen_d: usize,
    /// The raw count fell outside [1, D−1].
    pub clamped: bool,
}

pub fn correlation_matrix(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mu = column_means(x);
    let s = covariance_about(x, &mu);
    let sd: Vec<f64> = s.diagonal().iter().map(|v| v.sqrt()).collect();
    if let Some(col) = sd.iter().position(|v| !(*v > 0.0)) {
        return Err(invalid(format!("column {col} has zero variance")));
    }
    Ok(DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            s[(i, j)] / (sd[i] * sd[j])
        }
    }))
}

/// Number of correlation eigenvalues strictly above one, clamped to
/// [1, D−1].
pub fn kaiser_guttman(x: &DMatrix<f64>) -> Result<KaiserGuttman> {
    let big_d = x.ncols();
    if big_d < 2 {
        return Err(invalid("Kaiser-Guttman needs at least two variables"));
    }
    if x.nrows() < 2 {
        return Err(invalid("Kaiser-Guttman needs at least two rows"));
    }
    let r = correlation_matrix(x)?;
    let eig = EigenPair::of_symmetric(&r)?;
    let raw_count = eig.values.iter().filter(|v| **v > 1.0).count();
    let chosen_d = raw_count.clamp(1, big_d - 1);
    Ok(KaiserGuttman {
        eigenvalues: eig.values.iter().copied().collect(),
        raw_count,
        chosen_d,
        clamped: chosen_d != raw_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// PRESS(m) for m = 0..=max_m; PRESS(0) predicts every entry by zero.
    pub press: Vec<f64>,
    /// W_m for m = 1..=max_m (index m − 1).
    pub w: Vec<f64>,
    pub chosen_d: usize,
    pub threshold: f64,
    /// A singular value needed by the predictor vanished, so the range of m
    /// was cut short.
    pub truncated: bool,
}

/// Degrees of freedom used by the m-th component: n + p − 2m.
pub fn cv_df_component(n: usize, p: usize, m: usize) -> i64 {
    n as i64 + p as i64 - 2 * m as i64
}

/// Degrees of freedom left after m components, by successive subtraction
/// from (n − 1)p.
pub fn cv_df_remaining(n: usize, p: usize, m: usize) -> i64 {
    let used: i64 = (1..=m).map(|i| cv_df_component(n, p, i)).sum();
    (n as i64 - 1) * p as i64 - used
}

/// Right singular structure of a matrix from the eigendecomposition of its
/// Gram matrix: singular values and right vectors.
struct GramSvd {
    values: Vec<f64>,
    right: DMatrix<f64>,
}

fn gram_svd(gram: &DMatrix<f64>) -> Result<GramSvd> {
    let eig = EigenPair::of_symmetric(gram)?;
    Ok(GramSvd {
        values: eig.values.iter().map(|v| v.max(0.0).sqrt()).collect(),
        right: eig.vectors,
    })
}

fn drop_index(gram: &DMatrix<f64>, skip: usize) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..gram.nrows()).filter(|&i| i != skip).collect();
    DMatrix::from_fn(keep.len(), keep.len(), |a, b| gram[(keep[a], keep[b])])
}

/// Krzanowski cross-validation of the number of components.
///
/// For every entry x_ij the rank-m prediction combines the left singular
/// vectors of X with column j deleted and the right singular vectors of X
/// with row i deleted:
/// x̂_ij(m) = Σ_{t≤m} (ũ_it √d̃_t)(v̄_jt √d̄_t).
/// Signs of the leave-out singular vectors are aligned with the full-data
/// SVD.
pub fn cv_select(x: &DMatrix<f64>, threshold: f64) -> Result<CvResult> {
    let (n, p) = x.shape();
    if n <= p {
        return Err(invalid(format!(
            "cross-validation needs n > p, got n={n}, p={p}"
        )));
    }
    if p < 2 {
        return Err(invalid("cross-validation needs at least two variables"));
    }
    let xc = center_rows(x, &column_means(x));
    let gram = xc.transpose() * &xc;
    let full = gram_svd(&gram)?;
    let tiny = 1e-10 * full.values[0].max(f64::MIN_POSITIVE);
    if full.values[0] <= 0.0 {
        return Err(numerical("data matrix is identically zero after centring"));
    }
    let full_left: Vec<DVector<f64>> = (0..p)
        .map(|t| {
            if full.values[t] > tiny {
                &xc * full.right.column(t) / full.values[t]
            } else {
                DVector::zeros(n)
            }
        })
        .collect();

    let mut max_m = p - 1;
    let mut truncated = false;

    // Column deletions: scaled left vectors ũ_t √d̃_t, one n×(p−1) block per j.
    let mut col_factors: Vec<DMatrix<f64>> = Vec::with_capacity(p);
    for j in 0..p {
        let sub = gram_svd(&drop_index(&gram, j))?;
        let keep: Vec<usize> = (0..p).filter(|&i| i != j).collect();
        let xj = DMatrix::from_fn(n, p - 1, |r, c| xc[(r, keep[c])]);
        let mut factor = DMatrix::zeros(n, p - 1);
        for t in 0..p - 1 {
            let dt = sub.values[t];
            if dt <= tiny {
                if t < max_m {
                    max_m = t;
                    truncated = true;
                }
                break;
            }
            let mut u = &xj * sub.right.column(t) / dt;
            if u.dot(&full_left[t]) < 0.0 {
                u.neg_mut();
            }
            factor.set_column(t, &(u * dt.sqrt()));
        }
        col_factors.push(factor);
    }

    // Row deletions: scaled right vectors v̄_t √d̄_t, one p×p block per i.
    let mut press = vec![0.0; max_m + 1];
    press[0] = xc.iter().map(|v| v * v).sum::<f64>() / (n * p) as f64;
    let mut sums = vec![0.0; max_m + 1];
    for i in 0..n {
        let row = xc.row(i).transpose();
        let sub = gram_svd(&(&gram - &row * row.transpose()))?;
        let mut factor = DMatrix::zeros(p, max_m);
        for t in 0..max_m {
            let dt = sub.values[t];
            if dt <= tiny {
                max_m = t;
                truncated = true;
                break;
            }
            let mut v = sub.right.column(t).clone_owned();
            if v.dot(&full.right.column(t)) < 0.0 {
                v.neg_mut();
            }
            factor.set_column(t, &(v * dt.sqrt()));
        }
        for j in 0..p {
            let mut pred = 0.0;
            for m in 1..=max_m {
                pred += col_factors[j][(i, m - 1)] * factor[(j, m - 1)];
                let e = pred - xc[(i, j)];
                sums[m] += e * e;
            }
        }
    }
    press.truncate(max_m + 1);
    for m in 1..=max_m {
        press[m] = sums[m] / (n * p) as f64;
    }

    let w: Vec<f64> = (1..=max_m)
        .map(|m| {
            let dm = cv_df_component(n, p, m) as f64;
            let dr = cv_df_remaining(n, p, m) as f64;
            ((press[m - 1] - press[m]) / dm) / (press[m] / dr)
        })
        .collect();
    let chosen_d = w
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > threshold)
        .map(|(i, _)| i + 1)
        .max()
        .unwrap_or(1);
    Ok(CvResult {
        press,
        w,
        chosen_d,
        threshold,
        truncated,
    })
}

/// Which selectors to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Lrt1,
    Lrt2,
    Kg,
    Cv,
}

impl Selector {
    pub const ALL: [Selector; 4] = [Selector::Lrt1, Selector::Lrt2, Selector::Kg, Selector::Cv];

    pub fn name(self) -> &'static str {
        match self {
            Selector::Lrt1 => "lrt1",
            Selector::Lrt2 => "lrt2",
            Selector::Kg => "kg",
            Selector::Cv => "cv",
        }
    }
}

impl std::str::FromStr for Selector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lrt1" => Ok(Selector::Lrt1),
            "lrt2" => Ok(Selector::Lrt2),
            "kg" => Ok(Selector::Kg),
            "cv" => Ok(Selector::Cv),
            other => Err(invalid(format!("unknown selector '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    pub alpha: f64,
    pub cv_threshold: f64,
    pub cem: CemOptions,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            cv_threshold: 0.9,
            cem: CemOptions::default(),
        }
    }
}

/// Per-method statistics and the chosen dimension of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub n: usize,
    #[serde(rename = "D")]
    pub big_d: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lrt1: Option<LrtSelection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lrt2: Option<LrtSelection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kg: Option<KaiserGuttman>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvResult>,
    /// Selector failures, keyed by selector name.
    pub errors: Vec<(String, String)>,
}

impl SelectionReport {
    pub fn chosen(&self, selector: Selector) -> Option<usize> {
        match selector {
            Selector::Lrt1 => self.lrt1.as_ref().map(|r| r.chosen_d),
            Selector::Lrt2 => self.lrt2.as_ref().map(|r| r.chosen_d),
            Selector::Kg => self.kg.as_ref().map(|r| r.chosen_d),
            Selector::Cv => self.cv.as_ref().map(|r| r.chosen_d),
        }
    }
}

/// Runs the requested selectors on Euclidean (already unwrapped) data.
pub fn select_dimension(
    x: &DMatrix<f64>,
    selectors: &[Selector],
    opts: &SelectionOptions,
) -> SelectionReport {
    let mut report = SelectionReport {
        n: x.nrows(),
        big_d: x.ncols(),
        lrt1: None,
        lrt2: None,
        kg: None,
        cv: None,
        errors: Vec::new(),
    };
    for &sel in selectors {
        let outcome = match sel {
            Selector::Lrt1 => {
                select_lrt(x, opts.alpha, LrtKind::Type1).map(|r| report.lrt1 = Some(r))
            }
            Selector::Lrt2 => {
                select_lrt(x, opts.alpha, LrtKind::Type2).map(|r| report.lrt2 = Some(r))
            }
            Selector::Kg => kaiser_guttman(x).map(|r| report.kg = Some(r)),
            Selector::Cv => cv_select(x, opts.cv_threshold).map(|r| report.cv = Some(r)),
        };
        if let Err(e) = outcome {
            report.errors.push((sel.name().to_string(), e.to_string()));
        }
    }
    report
}

/// Unwraps torus data and runs the requested selectors.
pub fn select_dimension_torus(
    y: &AngleMatrix,
    selectors: &[Selector],
    opts: &SelectionOptions,
) -> Result<SelectionReport> {
    let x = unwrap_for_selection(y, &opts.cem)?;
    Ok(select_dimension(&x, selectors, opts))
}
