//! Synthetic torus data from the wrapped PPCA model, reconstruction metrics,
//! and a seeded Monte Carlo driver comparing TPPCA with Euclidean PPCA.
//!
//! Every replication draws its own true parameters and data from a ChaCha8
//! stream selected by the replication index, so results depend only on the
//! scenario and seed, not on thread scheduling.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::LatticeSpec;
use crate::linalg::procrustes_rotation;
use crate::model_selection::{select_dimension_torus, SelectionOptions, Selector};
use crate::ppca::ppca_closed_form;
use crate::tppca::{tppca_fit, TppcaConfig};
use crate::wrapped_normal::{wrap_angle, AngleMatrix};

/// The six noise levels of the reference design.
pub const REFERENCE_SIGMAS: [f64; 6] = [PI / 8.0, PI / 4.0, PI / 2.0, PI, 1.5 * PI, TAU];

/// How the true loading matrix is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WGen {
    /// Gaussian entries, columns orthonormalised, then scaled by singular
    /// values drawn uniformly from [lo, hi].
    Orthogonal { lo: f64, hi: f64 },
    /// A fixed D×d matrix given row by row.
    Fixed(Vec<Vec<f64>>),
}

impl Default for WGen {
    fn default() -> Self {
        WGen::Orthogonal { lo: 1.0, hi: 2.0 }
    }
}

/// How the true mean is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MuGen {
    /// Independent uniform angles on [0, 2π).
    #[default]
    Uniform,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub n: usize,
    #[serde(rename = "D")]
    pub big_d: usize,
    pub d_true: usize,
    pub sigma: f64,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub w_gen: WGen,
    #[serde(default)]
    pub mu_gen: MuGen,
    #[serde(default)]
    pub lattice: LatticeSpec,
}

impl SimScenario {
    pub fn new(n: usize, big_d: usize, d_true: usize, sigma: f64) -> Self {
        Self {
            n,
            big_d,
            d_true,
            sigma,
            replications: 100,
            seed: 0,
            w_gen: WGen::default(),
            mu_gen: MuGen::default(),
            lattice: LatticeSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n <= self.big_d {
            return Err(invalid(format!(
                "need n > D, got n={}, D={}",
                self.n, self.big_d
            )));
        }
        if self.d_true < 1 || self.d_true >= self.big_d {
            return Err(invalid(format!(
                "need 1 ≤ d_true < D, got d_true={}, D={}",
                self.d_true, self.big_d
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.replications == 0 {
            return Err(invalid("replications must be at least 1"));
        }
        match &self.w_gen {
            WGen::Orthogonal { lo, hi } if !(*lo > 0.0 && lo <= hi) => {
                return Err(invalid("singular value range must satisfy 0 < lo ≤ hi"));
            }
            WGen::Fixed(rows)
                if rows.len() != self.big_d || rows.iter().any(|r| r.len() != self.d_true) =>
            {
                return Err(invalid(format!(
                    "fixed loading matrix must be {}×{}",
                    self.big_d, self.d_true
                )));
            }
            _ => {}
        }
        if let MuGen::Fixed(mu) = &self.mu_gen {
            if mu.len() != self.big_d {
                return Err(Error::DimensionMismatch {
                    expected: self.big_d,
                    got: mu.len(),
                });
            }
        }
        Ok(())
    }

    fn rng(&self, rep_index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep_index as u64);
        rng
    }
}

/// One synthetic data set together with the truth that produced it.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub y: AngleMatrix,
    pub x_true: DMatrix<f64>,
    pub z_true: DMatrix<f64>,
    pub w_true: DMatrix<f64>,
    pub mu_true: DVector<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // row-major draw order
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

/// Draws μ, W, Z and ε, then X = μ + WZ + ε and Y = wrap(X).
pub fn gen_dataset(scn: &SimScenario, rep_index: usize) -> Result<SimDataset> {
    scn.validate()?;
    let (n, big_d, d) = (scn.n, scn.big_d, scn.d_true);
    let mut rng = scn.rng(rep_index);

    let mu_true = match &scn.mu_gen {
        MuGen::Uniform => DVector::from_fn(big_d, |_, _| wrap_angle(rng.random::<f64>() * TAU)),
        MuGen::Fixed(mu) => DVector::from_column_slice(mu),
    };
    let w_true = match &scn.w_gen {
        WGen::Orthogonal { lo, hi } => {
            let q = normal_matrix(&mut rng, big_d, d).qr().q();
            let scales: Vec<f64> = (0..d)
                .map(|_| lo + (hi - lo) * rng.random::<f64>())
                .collect();
            q * DMatrix::from_diagonal(&DVector::from_vec(scales))
        }
        WGen::Fixed(rows) => DMatrix::from_fn(big_d, d, |i, j| rows[i][j]),
    };
    let z_true = normal_matrix(&mut rng, n, d);
    let eps = normal_matrix(&mut rng, n, big_d) * scn.sigma;
    let mut x_true = &z_true * w_true.transpose() + eps;
    for mut row in x_true.row_iter_mut() {
        row += mu_true.transpose();
    }
    let y = AngleMatrix::from_unwrapped(&x_true)?;
    Ok(SimDataset {
        y,
        x_true,
        z_true,
        w_true,
        mu_true,
    })
}

/// Reconstruction errors of one fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse_x: f64,
    pub mae_x: f64,
    pub mse_z: f64,
    pub mae_z: f64,
    /// Errors of X measured as the shortest signed arc between angles.
    pub mse_x_angular: f64,
    pub mae_x_angular: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 6] = [
        "mse_x",
        "mae_x",
        "mse_z",
        "mae_z",
        "mse_x_angular",
        "mae_x_angular",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.mse_x,
            self.mae_x,
            self.mse_z,
            self.mae_z,
            self.mse_x_angular,
            self.mae_x_angular,
        ]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Self {
            mse_x: v[0],
            mae_x: v[1],
            mse_z: v[2],
            mae_z: v[3],
            mse_x_angular: v[4],
            mae_x_angular: v[5],
        }
    }
}

/// Shifts each column of `x` by the multiple of 2π that brings it closest,
/// in squared error, to the matching column of `target`.
pub fn align_columns(x: &DMatrix<f64>, target: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (mut col, t) in out.column_iter_mut().zip(target.column_iter()) {
        let gap = (&t - &col).mean();
        let shift = TAU * (gap / TAU).round();
        col.add_scalar_mut(shift);
    }
    out
}

fn mse_mae(diff: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut sq, mut abs, mut count) = (0.0, 0.0, 0usize);
    for e in diff {
        sq += e * e;
        abs += e.abs();
        count += 1;
    }
    (sq / count as f64, abs / count as f64)
}

fn check_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(invalid(format!(
            "{what} has shape {:?}, expected {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// X errors over all n·D entries after per-column 2π alignment; Z errors over
/// all n·d entries after the orthogonal Procrustes map of the scores onto
/// the true latent variables.
pub fn metrics(
    x_recons: &DMatrix<f64>,
    x_true: &DMatrix<f64>,
    z_recons: &DMatrix<f64>,
    z_true: &DMatrix<f64>,
) -> Result<Metrics> {
    check_shape(x_recons, x_true, "reconstructed X")?;
    check_shape(z_recons, z_true, "reconstructed Z")?;
    if x_recons.nrows() != z_recons.nrows() {
        return Err(invalid("X and Z reconstructions have different row counts"));
    }
    let aligned = align_columns(x_recons, x_true);
    let (mse_x, mae_x) = mse_mae(aligned.iter().zip(x_true.iter()).map(|(a, b)| a - b));
    let (mse_x_angular, mae_x_angular) = mse_mae(
        x_recons
            .iter()
            .zip(x_true.iter())
            .map(|(a, b)| wrap_angle(a - b + PI) - PI),
    );
    let rot = procrustes_rotation(z_recons, z_true)?;
    let z_aligned = z_recons * rot;
    let (mse_z, mae_z) = mse_mae(z_aligned.iter().zip(z_true.iter()).map(|(a, b)| a - b));
    Ok(Metrics {
        mse_x,
        mae_x,
        mse_z,
        mae_z,
        mse_x_angular,
        mae_x_angular,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tppca,
    Ppca,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Tppca, Method::Ppca];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tppca => "tppca",
            Method::Ppca => "ppca",
        }
    }
}

/// Fits one method with the true latent dimension and scores it against the
/// truth.
pub fn evaluate(method: Method, data: &SimDataset, scn: &SimScenario) -> Result<Metrics> {
    let (x_recons, z) = match method {
        Method::Tppca => {
            let cfg = TppcaConfig::new(scn.d_true).with_lattice(scn.lattice);
            let fit = tppca_fit(&data.y, &cfg)?;
            (fit.model.reconstruct(&fit.scores)?, fit.scores)
        }
        Method::Ppca => {
            let y = data.y.data();
            let model = ppca_closed_form(y, scn.d_true)?;
            let z = model.scores(y)?;
            (model.reconstruct(&z)?, z)
        }
    };
    metrics(&x_recons, &data.x_true, &z, &data.z_true)
}

/// Outcome of one replication of one cell.
#[derive(Debug, Clone)]
pub struct Replication {
    pub methods: Vec<(Method, std::result::Result<Metrics, String>)>,
    pub selection: Vec<(Selector, std::result::Result<usize, String>)>,
}

pub fn run_replication(
    scn: &SimScenario,
    rep_index: usize,
    selection: Option<&SelectionOptions>,
) -> Replication {
    let data = match gen_dataset(scn, rep_index) {
        Ok(data) => data,
        Err(e) => {
            let msg = e.to_string();
            return Replication {
                methods: Method::ALL.iter().map(|m| (*m, Err(msg.clone()))).collect(),
                selection: selection
                    .map(|_| {
                        Selector::ALL
                            .iter()
                            .map(|s| (*s, Err(msg.clone())))
                            .collect()
                    })
                    .unwrap_or_default(),
            };
        }
    };
    let methods = Method::ALL
        .iter()
        .map(|&m| (m, evaluate(m, &data, scn).map_err(|e| e.to_string())))
        .collect();
    let selection = match selection {
        None => Vec::new(),
        Some(opts) => match select_dimension_torus(&data.y, &Selector::ALL, opts) {
            Ok(report) => Selector::ALL
                .iter()
                .map(|&s| {
                    let chosen = report.chosen(s).ok_or_else(|| {
                        report
                            .errors
                            .iter()
                            .find(|(name, _)| name == s.name())
                            .map(|(_, e)| e.clone())
                            .unwrap_or_else(|| "selector did not run".to_string())
                    });
                    (s, chosen)
                })
                .collect(),
            Err(e) => Selector::ALL
                .iter()
                .map(|&s| (s, Err(e.to_string())))
                .collect(),
        },
    };
    Replication { methods, selection }
}

/// Mean metrics of one method over the successful replications of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// NaN everywhere when every replication failed.
    pub mean: Metrics,
    pub replications: usize,
    pub failures: usize,
    pub first_error: Option<String>,
}

/// How often each dimension was chosen by one selector in a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorSummary {
    pub selector: Selector,
    /// Counts for d̂ = 1..D−1.
    pub counts: BTreeMap<usize, usize>,
    pub replications: usize,
    pub failures: usize,
}

impl SelectorSummary {
    pub fn successes(&self) -> usize {
        self.replications - self.failures
    }

    pub fn frequency(&self, d_hat: usize) -> f64 {
        let ok = self.successes();
        if ok == 0 {
            return f64::NAN;
        }
        self.counts.get(&d_hat).copied().unwrap_or(0) as f64 / ok as f64
    }

    /// The most frequently chosen dimension; ties go to the smaller d.
    pub fn mode(&self) -> Option<usize> {
        self.counts
            .iter()
            .filter(|(_, c)| **c > 0)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(d, _)| *d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scenario: SimScenario,
    pub methods: Vec<MethodSummary>,
    pub selection: Vec<SelectorSummary>,
}

impl CellResult {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn selector(&self, selector: Selector) -> Option<&SelectorSummary> {
        self.selection.iter().find(|s| s.selector == selector)
    }
}

/// Aggregates replications in index order.
pub fn summarize(scn: &SimScenario, reps: &[Replication], with_selection: bool) -> CellResult {
    let methods = Method::ALL
        .iter()
        .map(|&method| {
            let mut sums = [0.0; 6];
            let (mut ok, mut failures, mut first_error) = (0usize, 0usize, None);
            for rep in reps {
                match rep
                    .methods
                    .iter()
                    .find(|(m, _)| *m == method)
                    .map(|(_, r)| r)
                {
                    Some(Ok(m)) => {
                        for (s, v) in sums.iter_mut().zip(m.values()) {
                            *s += v;
                        }
                        ok += 1;
                    }
                    Some(Err(e)) => {
                        failures += 1;
                        first_error.get_or_insert_with(|| e.clone());
                    }
                    None => failures += 1,
                }
            }
            MethodSummary {
                method,
                mean: Metrics::from_values(sums.map(|s| s / ok as f64)),
                replications: reps.len(),
                failures,
                first_error,
            }
        })
        .collect();
    let selection = if with_selection {
        Selector::ALL
            .iter()
            .map(|&selector| {
                let mut counts: BTreeMap<usize, usize> = (1..scn.big_d).map(|d| (d, 0)).collect();
                let mut failures = 0;
                for rep in reps {
                    match rep
                        .selection
                        .iter()
                        .find(|(s, _)| *s == selector)
                        .map(|(_, r)| r)
                    {
                        Some(Ok(d)) => *counts.entry(*d).or_insert(0) += 1,
                        _ => failures += 1,
                    }
                }
                SelectorSummary {
                    selector,
                    counts,
                    replications: reps.len(),
                    failures,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    CellResult {
        scenario: scn.clone(),
        methods,
        selection,
    }
}

/// A full factorial design over sample size, true dimension and noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGrid {
    pub n: Vec<usize>,
    #[serde(rename = "D")]
    pub big_d: usize,
    pub d_true: Vec<usize>,
    pub sigma: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub selection: bool,
}

impl Default for SimGrid {
    fn default() -> Self {
        Self {
            n: vec![50, 100, 500],
            big_d: 5,
            d_true: vec![2, 3],
            sigma: REFERENCE_SIGMAS.to_vec(),
            replications: 100,
            seed: 0,
            selection: false,
        }
    }
}

impl SimGrid {
    /// Cells ordered by d_true, then σ, then n.
    pub fn scenarios(&self) -> Vec<SimScenario> {
        let mut out = Vec::new();
        for &d in &self.d_true {
            for &sigma in &self.sigma {
                for &n in &self.n {
                    let mut scn = SimScenario::new(n, self.big_d, d, sigma);
                    scn.replications = self.replications;
                    scn.seed = self.seed;
                    out.push(scn);
                }
            }
        }
        out
    }
}

/// Results of a Monte Carlo study, one entry per grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub cells: Vec<CellResult>,
}

/// Runs every replication of every cell, in parallel on the current rayon
/// pool, and aggregates per cell in replication order.
pub fn monte_carlo(
    scenarios: &[SimScenario],
    selection: Option<&SelectionOptions>,
) -> Result<MetricTable> {
    if scenarios.is_empty() {
        return Err(invalid("simulation grid is empty"));
    }
    for scn in scenarios {
        scn.validate()?;
    }
    let jobs: Vec<(usize, usize)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(c, scn)| (0..scn.replications).map(move |r| (c, r)))
        .collect();
    let results: Vec<Replication> = jobs
        .par_iter()
        .map(|&(c, r)| run_replication(&scenarios[c], r, selection))
        .collect();
    let mut cells = Vec::with_capacity(scenarios.len());
    let mut offset = 0;
    for scn in scenarios {
        let reps = &results[offset..offset + scn.replications];
        offset += scn.replications;
        cells.push(summarize(scn, reps, selection.is_some()));
    }
    Ok(MetricTable { cells })
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("writing CSV: {e}"))
}

impl MetricTable {
    pub fn cell(&self, method_d: usize, sigma: f64, n: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            c.scenario.d_true == method_d && c.scenario.sigma == sigma && c.scenario.n == n
        })
    }

    /// Tidy metrics: method, n, D, d_true, sigma, metric, value,
    /// replications, failures.
    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "n",
            "D",
            "d_true",
            "sigma",
            "metric",
            "value",
            "replications",
            "failures",
        ])
        .map_err(csv_err)?;
        for cell in &self.cells {
            let s = &cell.scenario;
            for m in &cell.methods {
                for (name, value) in Metrics::NAMES.iter().zip(m.mean.values()) {
                    w.write_record([
                        m.method.name().to_string(),
                        s.n.to_string(),
                        s.big_d.to_string(),
                        s.d_true.to_string(),
                        s.sigma.to_string(),
                        name.to_string(),
                        value.to_string(),
                        m.replications.to_string(),
                        m.failures.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(|e| invalid(format!("writing CSV: {e}")))
    }

    /// Selection frequencies: selector, n, D, d_true, sigma, d_hat, count,
    /// frequency, replications, failures.
    pub fn write_selection_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "selector",
            "n",
            "D",
            "d_true",
            "sigma",
            "d_hat",
            "count",
            "frequency",
            "replications",
            "failures",
        ])
        .map_err(csv_err)?;
        for cell in &self.cells {
            let s = &cell.scenario;
            for sel in &cell.selection {
                for (d_hat, count) in &sel.counts {
                    w.write_record([
                        sel.selector.name().to_string(),
                        s.n.to_string(),
                        s.big_d.to_string(),
                        s.d_true.to_string(),
                        s.sigma.to_string(),
                        d_hat.to_string(),
                        count.to_string(),
                        sel.frequency(*d_hat).to_string(),
                        sel.replications.to_string(),
                        sel.failures.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(|e| invalid(format!("writing CSV: {e}")))
    }
}
