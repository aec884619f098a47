//! JSON document for a fitted TPPCA model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ppca::PpcaModel;
use crate::tppca::TppcaFit;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub converged: bool,
    pub final_loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    /// SHA-256 of the input file, hex encoded.
    pub input_digest: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: u32,
    #[serde(rename = "D")]
    pub big_d: usize,
    pub d: usize,
    pub mu: Vec<f64>,
    /// Loadings, one inner array per row of the D×d matrix.
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub sigma2: f64,
    #[serde(rename = "J")]
    pub lattice_radius: u32,
    pub convergence: Convergence,
    pub provenance: Provenance,
}

impl ModelDocument {
    pub fn from_model(
        model: &PpcaModel,
        lattice_radius: u32,
        convergence: Convergence,
        provenance: Provenance,
    ) -> Self {
        Self {
            version: FORMAT_VERSION,
            big_d: model.dim(),
            d: model.latent_dim(),
            mu: model.mu.iter().copied().collect(),
            w: model
                .w
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            sigma2: model.sigma2,
            lattice_radius,
            convergence,
            provenance,
        }
    }

    pub fn from_fit(fit: &TppcaFit, lattice_radius: u32, provenance: Provenance) -> Self {
        let convergence = Convergence {
            iterations: fit.iterations(),
            converged: fit.converged,
            final_loglik: fit.final_loglik(),
        };
        Self::from_model(&fit.model, lattice_radius, convergence, provenance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(invalid(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        if self.mu.len() != self.big_d {
            return Err(invalid(format!(
                "mu has {} entries, D is {}",
                self.mu.len(),
                self.big_d
            )));
        }
        if self.w.len() != self.big_d || self.w.iter().any(|r| r.len() != self.d) {
            return Err(invalid(format!("W must be {}×{}", self.big_d, self.d)));
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<PpcaModel> {
        self.validate()?;
        let w = DMatrix::from_fn(self.big_d, self.d, |i, j| self.w[i][j]);
        PpcaModel::new(DVector::from_vec(self.mu.clone()), w, self.sigma2)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| invalid(format!("serialising model: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self =
            serde_json::from_str(text).map_err(|e| invalid(format!("parsing model: {e}")))?;
        doc.validate()?;
        Ok(doc)
    }
}
