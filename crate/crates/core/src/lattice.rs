//! Search over integer winding vectors k ∈ {−J..J}^D for quadratic forms of
//! the unwrapped residual r = b + 2πk.
//!
//! The form q(k) = rᵀ A r is evaluated through the upper-triangular factor R
//! of A = RᵀR, so that fixing the trailing coordinates of k yields a lower
//! bound on q. A depth-first search over coordinates (last to first) with
//! that bound finds the exact minimiser, and enumerates every lattice point
//! whose value lies within a slack of the minimum, without visiting the whole
//! (2J+1)^D box.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky, spd_inverse};

/// Slack on q (in squared Mahalanobis units) beyond which lattice terms are
/// dropped from density sums: exp(−30) relative to the largest term.
pub const DENSITY_SLACK: f64 = 60.0;

/// Truncated winding lattice {−radius..radius}^D with a term budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub radius: u32,
    pub max_terms: usize,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        Self {
            radius: 2,
            max_terms: 1_000_000,
        }
    }
}

impl LatticeSpec {
    pub fn new(radius: u32) -> Self {
        Self {
            radius,
            ..Self::default()
        }
    }

    /// Radius covering eight marginal standard deviations of `sigma` on every
    /// coordinate, plus one winding.
    pub fn adaptive(sigma: &DMatrix<f64>) -> Self {
        let widest = sigma
            .diagonal()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .fold(0.0_f64, f64::max);
        Self::new((8.0 * widest / TAU).ceil() as u32 + 1)
    }

    /// Size of the full box, (2J+1)^D.
    pub fn terms(&self, dim: usize) -> f64 {
        (2.0 * self.radius as f64 + 1.0).powi(dim as i32)
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        let terms = self.terms(dim);
        if terms > self.max_terms as f64 {
            return Err(Error::Resource {
                terms,
                budget: self.max_terms,
            });
        }
        Ok(())
    }

    /// Every lattice point in lexicographic order.
    pub fn points(&self, dim: usize) -> Result<Vec<Vec<i32>>> {
        self.check(dim)?;
        let j = self.radius as i32;
        let mut out = vec![vec![]];
        for _ in 0..dim {
            out = out
                .into_iter()
                .flat_map(|prefix: Vec<i32>| {
                    (-j..=j).map(move |k| {
                        let mut p = prefix.clone();
                        p.push(k);
                        p
                    })
                })
                .collect();
        }
        Ok(out)
    }
}

/// The quadratic form q(k) = (b + 2πk)ᵀ A (b + 2πk) for a positive definite A.
#[derive(Debug, Clone)]
pub struct WrapQuadratic {
    /// R with A = RᵀR, upper triangular.
    upper: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeMin {
    pub k: Vec<i32>,
    pub value: f64,
}

impl WrapQuadratic {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(invalid("quadratic form must be a non-empty square matrix"));
        }
        let l = cholesky(a)?;
        Ok(Self {
            upper: l.transpose(),
        })
    }

    /// Mahalanobis form of a covariance: A = Σ⁻¹.
    pub fn from_covariance(sigma: &DMatrix<f64>) -> Result<Self> {
        Self::new(&spd_inverse(sigma)?)
    }

    pub fn dim(&self) -> usize {
        self.upper.nrows()
    }

    pub fn eval(&self, b: &[f64], k: &[i32]) -> f64 {
        let d = self.dim();
        let r: Vec<f64> = (0..d).map(|i| b[i] + TAU * k[i] as f64).collect();
        (0..d)
            .map(|i| {
                let c: f64 = (i..d).map(|j| self.upper[(i, j)] * r[j]).sum();
                c * c
            })
            .sum()
    }

    /// Exact minimiser of q over the box; ties go to the lexicographically
    /// smallest k.
    pub fn argmin(&self, b: &[f64], radius: u32) -> LatticeMin {
        let mut search = Search::new(self, b, radius);
        let mut best = LatticeMin {
            k: vec![0; self.dim()],
            value: f64::INFINITY,
        };
        search.descend(self.dim(), 0.0, f64::INFINITY, &mut |k, q| {
            if q < best.value || (q == best.value && k < best.k.as_slice()) {
                best.k.copy_from_slice(k);
                best.value = q;
            }
            best.value
        });
        best
    }

    /// Calls `visit(k, q)` for every lattice point with q ≤ q_min + slack and
    /// returns q_min. A single search runs with the bound tightening to the
    /// best value found so far plus the slack.
    pub fn for_each_within(
        &self,
        b: &[f64],
        radius: u32,
        slack: f64,
        mut visit: impl FnMut(&[i32], f64),
    ) -> f64 {
        let d = self.dim();
        let mut ks: Vec<i32> = Vec::new();
        let mut qs: Vec<f64> = Vec::new();
        let mut qmin = f64::INFINITY;
        let mut search = Search::new(self, b, radius);
        search.descend(d, 0.0, f64::INFINITY, &mut |k, q| {
            qmin = qmin.min(q);
            if q <= qmin + slack {
                ks.extend_from_slice(k);
                qs.push(q);
            }
            qmin + slack
        });
        for (i, &q) in qs.iter().enumerate() {
            if q <= qmin + slack {
                visit(&ks[i * d..(i + 1) * d], q);
            }
        }
        qmin
    }
}

struct Search<'a> {
    upper: &'a DMatrix<f64>,
    b: &'a [f64],
    radius: i64,
    k: Vec<i32>,
    r: Vec<f64>,
}

impl<'a> Search<'a> {
    fn new(q: &'a WrapQuadratic, b: &'a [f64], radius: u32) -> Self {
        let d = q.dim();
        Self {
            upper: &q.upper,
            b,
            radius: radius as i64,
            k: vec![0; d],
            r: vec![0.0; d],
        }
    }

    /// Fixes coordinate `level − 1` given the coordinates above it, trying
    /// values in increasing order of their contribution (zig-zag outwards
    /// from the real-valued optimum). `leaf` receives complete points and
    /// returns the current pruning bound.
    fn descend(
        &mut self,
        level: usize,
        partial: f64,
        mut bound: f64,
        leaf: &mut dyn FnMut(&[i32], f64) -> f64,
    ) -> f64 {
        let i = level - 1;
        let d = self.k.len();
        let rii = self.upper[(i, i)];
        let bi = self.b[i];
        let tail: f64 = ((i + 1)..d).map(|j| self.upper[(i, j)] * self.r[j]).sum();
        let cost = |k: i64| {
            let c = rii * (bi + TAU * k as f64) + tail;
            c * c
        };

        let j = self.radius;
        let centre = ((-tail / rii - bi) / TAU).floor();
        let mut lo = centre.clamp(-(j as f64) - 1.0, j as f64) as i64;
        let mut hi = (centre + 1.0).clamp(-(j as f64), j as f64 + 1.0) as i64;
        loop {
            let c_lo = (lo >= -j).then(|| cost(lo));
            let c_hi = (hi <= j).then(|| cost(hi));
            let (k, c2) = match (c_lo, c_hi) {
                (Some(a), Some(b)) if a <= b => (lo, a),
                (Some(_), Some(b)) => (hi, b),
                (Some(a), None) => (lo, a),
                (None, Some(b)) => (hi, b),
                (None, None) => break,
            };
            let q = partial + c2;
            if q > bound {
                break;
            }
            if k == lo {
                lo -= 1;
            } else {
                hi += 1;
            }
            self.k[i] = k as i32;
            self.r[i] = bi + TAU * k as f64;
            bound = if i == 0 {
                leaf(&self.k, q)
            } else {
                self.descend(i, q, bound, leaf)
            };
        }
        bound
    }
}
