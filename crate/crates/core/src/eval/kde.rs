use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::MaskedMatrix;
use crate::scalar::{log_sum_exp, Real};

/// Product Gaussian kernel density estimate with per-dimension bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    dim: usize,
    /// Row-major N×d.
    sample: Vec<f64>,
    bandwidth: Vec<f64>,
}

impl KdeModel {
    /// Silverman's rule `h_j = 1.06 σ̂_j N^{-1/5}` on a fully observed
    /// sample (σ̂ with the `N − 1` denominator).
    pub fn fit<T: Real>(sample: &MaskedMatrix<T>) -> Result<Self, EvalError> {
        let (n, d) = (sample.nrows(), sample.ncols());
        if !sample.is_fully_observed() {
            return Err(EvalError::Incomplete("KDE sample".into()));
        }
        if n < 2 {
            return Err(EvalError::TooFewPoints { needed: 2, found: n });
        }
        let values: Vec<f64> = (0..n).flat_map(|r| sample.row_values(r).iter().map(|v| v.as_f64())).collect();
        let factor = 1.06 * (n as f64).powf(-0.2);
        let mut bandwidth = Vec::with_capacity(d);
        for j in 0..d {
            let mean = (0..n).map(|r| values[r * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (values[r * d + j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let h = factor * var.sqrt();
            if !(h > 0.0) || !h.is_finite() {
                return Err(EvalError::DegenerateBandwidth(sample.columns()[j].clone()));
            }
            bandwidth.push(h);
        }
        Ok(Self { dim: d, sample: values, bandwidth })
    }

    /// Explicit sample (rows of length `bandwidth.len()`) and bandwidths.
    pub fn with_bandwidth(rows: &[Vec<f64>], bandwidth: Vec<f64>) -> Result<Self, EvalError> {
        let dim = bandwidth.len();
        if rows.is_empty() {
            return Err(EvalError::TooFewPoints { needed: 1, found: 0 });
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(EvalError::Shape("sample rows must match the bandwidth length".into()));
        }
        if let Some(j) = bandwidth.iter().position(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(EvalError::DegenerateBandwidth(format!("dimension {j}")));
        }
        Ok(Self { dim, sample: rows.concat(), bandwidth })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sample.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    /// `log((1/N) Σ_i Π_j φ((q_j − x_ij)/h_j)/h_j)`.
    pub fn log_density(&self, query: &[f64]) -> f64 {
        let d = self.dim;
        let inv_h: Vec<f64> = self.bandwidth.iter().map(|h| 1.0 / h).collect();
        let norm = -(self.len() as f64).ln()
            - self.bandwidth.iter().map(|h| h.ln()).sum::<f64>()
            - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        let terms: Vec<f64> = self
            .sample
            .chunks_exact(d)
            .map(|x| {
                let mut s = 0.0;
                for j in 0..d {
                    let z = (query[j] - x[j]) * inv_h[j];
                    s += z * z;
                }
                -0.5 * s
            })
            .collect();
        log_sum_exp(&terms) + norm
    }

    /// [`Self::log_density`] at every row of `points`, in parallel.
    pub fn log_density_rows(&self, points: &[Vec<f64>]) -> Vec<f64> {
        points.par_iter().map(|p| self.log_density(p)).collect()
    }
}

/// Free-function form of [`KdeModel::log_density`].
pub fn kde_log_density(model: &KdeModel, query: &[f64]) -> f64 {
    model.log_density(query)
}
