use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{EmError, MixtureModel, Responsibilities};
use crate::data::MaskedMatrix;
use crate::ppca::{ConditionalMoments, ObservationPattern, PatternFactor};
use crate::scalar::{log_sum_exp, Real};

/// Rows grouped by observation mask. Patterns are numbered in order of
/// first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternIndex {
    pub patterns: Vec<ObservationPattern>,
    pub row_pattern: Vec<usize>,
}

impl PatternIndex {
    pub fn new<T: Real>(data: &MaskedMatrix<T>) -> Self {
        let mut masks: Vec<&[bool]> = Vec::new();
        let mut row_pattern = Vec::with_capacity(data.nrows());
        for r in 0..data.nrows() {
            let mask = data.row_mask(r);
            let p = match masks.iter().position(|m| *m == mask) {
                Some(p) => p,
                None => {
                    masks.push(mask);
                    masks.len() - 1
                }
            };
            row_pattern.push(p);
        }
        let patterns = masks.iter().map(|m| ObservationPattern::from_mask(m)).collect();
        Self { patterns, row_pattern }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Rows of each pattern, in row order.
    pub fn rows_by_pattern(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.patterns.len()];
        for (r, &p) in self.row_pattern.iter().enumerate() {
            out[p].push(r);
        }
        out
    }
}

/// Output of one E-step.
#[derive(Debug, Clone)]
pub struct EStep<T: Real> {
    pub responsibilities: Responsibilities<T>,
    /// `Σ_n log Σ_k π_k p(x_n^o | k)`.
    pub loglik: T,
    pub row_loglik: Vec<T>,
    pub patterns: PatternIndex,
    /// `[pattern][component]`.
    factors: Vec<Vec<PatternFactor<T>>>,
    /// Per component, N×d: observed cells as measured, missing cells
    /// replaced by `⟨x^m⟩` under that component.
    completed: Vec<DMatrix<T>>,
}

impl<T: Real> EStep<T> {
    pub fn n_components(&self) -> usize {
        self.completed.len()
    }

    /// Rows completed with component `k`'s conditional means.
    pub fn completed(&self, k: usize) -> &DMatrix<T> {
        &self.completed[k]
    }

    /// `Q` of component `k` for observation pattern `p`.
    pub fn cond_cov(&self, pattern: usize, k: usize) -> &DMatrix<T> {
        self.factors[pattern][k].cond_cov()
    }

    /// Conditional moments of row `n` under component `k`.
    pub fn moments(&self, data: &MaskedMatrix<T>, n: usize, k: usize) -> ConditionalMoments<T> {
        let p = self.patterns.row_pattern[n];
        let missing = &self.patterns.patterns[p].missing;
        let row = self.completed[k].row(n);
        ConditionalMoments {
            cond_mean: DVector::from_iterator(missing.len(), missing.iter().map(|&j| row[j])),
            cond_cov: self.cond_cov(p, k).clone(),
            obs_logdensity: self.factors[p][k].log_density(data.row_values(n)),
        }
    }
}

/// Responsibilities, conditional moments and log-likelihood of `data`
/// under `model`. A row with no observed cell gets `R[n,·] = π` and adds
/// nothing to the log-likelihood.
pub fn e_step<T: Real>(model: &MixtureModel<T>, data: &MaskedMatrix<T>, patterns: &PatternIndex) -> Result<EStep<T>, EmError> {
    model.check_data(data)?;
    if patterns.row_pattern.len() != data.nrows() {
        return Err(EmError::Shape("pattern index was built for different data".into()));
    }
    let k_count = model.n_components();
    let d = model.dim();
    let n = data.nrows();

    let factors: Vec<Vec<PatternFactor<T>>> = patterns
        .patterns
        .par_iter()
        .map(|p| model.components.iter().enumerate().map(|(k, c)| PatternFactor::new(c, p, k)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    let log_weights: Vec<T> = model.components.iter().map(|c| c.weight.ln()).collect();

    struct RowOut<T> {
        log_joint: Vec<T>,
        completed: Vec<T>,
    }

    let rows: Vec<RowOut<T>> = (0..n)
        .into_par_iter()
        .map(|r| {
            let p = patterns.row_pattern[r];
            let pattern = &patterns.patterns[p];
            let row = data.row_values(r);
            let mut log_joint = Vec::with_capacity(k_count);
            let mut completed = Vec::with_capacity(k_count * d);
            let mut cond = vec![T::zero(); pattern.missing.len()];
            for (k, f) in factors[p].iter().enumerate() {
                log_joint.push(log_weights[k] + f.log_density(row));
                f.cond_mean_into(row, &mut cond);
                let start = completed.len();
                completed.extend_from_slice(row);
                for (&j, &v) in pattern.missing.iter().zip(&cond) {
                    completed[start + j] = v;
                }
            }
            RowOut { log_joint, completed }
        })
        .collect();

    let mut resp = DMatrix::zeros(n, k_count);
    let mut completed = vec![DMatrix::zeros(n, d); k_count];
    let mut row_loglik = Vec::with_capacity(n);
    let mut loglik = T::zero();
    for (r, out) in rows.iter().enumerate() {
        let lse = log_sum_exp(&out.log_joint);
        if !lse.is_finite_value() {
            let component = out.log_joint.iter().position(|v| !v.is_finite_value()).unwrap_or(0);
            return Err(EmError::NonFinite { iteration: 0, component, row: r });
        }
        for k in 0..k_count {
            resp[(r, k)] = (out.log_joint[k] - lse).exp();
            for j in 0..d {
                completed[k][(r, j)] = out.completed[k * d + j];
            }
        }
        row_loglik.push(lse);
        loglik += lse;
    }

    Ok(EStep { responsibilities: Responsibilities(resp), loglik, row_loglik, patterns: patterns.clone(), factors, completed })
}
