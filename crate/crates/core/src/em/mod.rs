//! Mixture of PPCA components fitted to incompletely observed rows.
//!
//! One iteration is an E-step ([`e_step`]) followed by two maximization
//! stages: [`m_step_stage1`] moves the weights and means, then
//! [`m_step_stage2`] moves loadings and noise using the fresh means. Rows
//! are grouped by observation pattern so each (component, pattern) pair is
//! factorized once per iteration.

mod estep;
mod init;
mod mstep;
mod persist;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::MaskedMatrix;
use crate::ppca::{PpcaComponent, PpcaError};
use crate::scalar::Real;

pub use estep::{e_step, EStep, PatternIndex};
pub use init::{init_model, repair_positive_definite, InitOptions, InitReport};
pub use mstep::{m_step_stage1, m_step_stage2, sufficient_stats, ComponentStats, Stage1, SufficientStats};
pub use persist::{ModelDocument, MODEL_FORMAT, MODEL_SCHEMA_VERSION};

/// Responsibility mass below which a component counts as dead.
pub const DEAD_COMPONENT_MASS: f64 = 1e-8;
/// Relative floor on the noise variance, as a fraction of `tr(S)/d`.
pub const NOISE_FLOOR_REL: f64 = 1e-8;
/// Relative log-likelihood decrease tolerated before warning.
pub const MONOTONE_SLACK: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EmError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ppca(#[from] PpcaError),
    #[error("log-likelihood became non-finite at iteration {iteration} (component {component}, row {row})")]
    NonFinite { iteration: usize, component: usize, row: usize },
    #[error("model document has schema {found}, expected {expected}")]
    Schema { found: String, expected: String },
    #[error("model document: {0}")]
    Document(String),
}

/// K components sharing dimension d and latent dimension q.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel<T: Real> {
    pub components: Vec<PpcaComponent<T>>,
    pub columns: Vec<String>,
    pub latent_dim: usize,
    /// Observed-data log-likelihood, one entry per E-step.
    pub trace: Vec<f64>,
}

impl<T: Real> MixtureModel<T> {
    pub fn new(components: Vec<PpcaComponent<T>>, columns: Vec<String>) -> Result<Self, EmError> {
        let first = components.first().ok_or_else(|| EmError::Config("a mixture needs at least one component".into()))?;
        let (d, q) = (first.dim(), first.latent_dim());
        if columns.len() != d {
            return Err(EmError::Shape(format!("{} column names for dimension {d}", columns.len())));
        }
        if components.iter().any(|c| c.dim() != d || c.latent_dim() != q) {
            return Err(EmError::Shape("components disagree on d or q".into()));
        }
        if components.iter().any(|c| c.weight < T::zero()) {
            return Err(EmError::Config("negative component weight".into()));
        }
        let total = components.iter().fold(T::zero(), |a, c| a + c.weight);
        // 1e-12 in double precision, looser for narrower types
        let slack = T::lit(1e-12).max(T::default_epsilon() * T::from_count(16 * components.len()));
        if (total - T::one()).abs() > slack {
            return Err(EmError::Config(format!("weights sum to {}, not 1", total.as_f64())));
        }
        Ok(Self { components, columns, latent_dim: q, trace: Vec::new() })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn weights(&self) -> Vec<T> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub(crate) fn check_data(&self, data: &MaskedMatrix<T>) -> Result<(), EmError> {
        if data.columns() != self.columns.as_slice() {
            return Err(EmError::Shape(format!("model columns {:?} differ from data columns {:?}", self.columns, data.columns())));
        }
        Ok(())
    }

    /// Copy with the coordinates reordered as `order`.
    pub fn permute_columns(&self, order: &[usize]) -> Self {
        let components = self
            .components
            .iter()
            .map(|c| PpcaComponent {
                weight: c.weight,
                mean: DVector::from_iterator(order.len(), order.iter().map(|&j| c.mean[j])),
                loadings: DMatrix::from_fn(order.len(), c.latent_dim(), |i, l| c.loadings[(order[i], l)]),
                noise: c.noise,
            })
            .collect();
        Self {
            components,
            columns: order.iter().map(|&j| self.columns[j].clone()).collect(),
            latent_dim: self.latent_dim,
            trace: self.trace.clone(),
        }
    }
}

/// Posterior probabilities `⟨z_nk⟩`, N×K.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities<T: Real>(pub DMatrix<T>);

impl<T: Real> Responsibilities<T> {
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    /// Index of the largest entry per row; the lowest index wins ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.0
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Stop once `|Δℓ| / (1 + |ℓ|)` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Seed for reseeding dead components.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 500, seed: 0 }
    }
}

/// What happened during [`fit`] besides the parameter updates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    /// (iteration, component) of each dead-component reseed.
    pub reseeded: Vec<(usize, usize)>,
    /// (iteration, component) of each noise-floor clamp.
    pub noise_clamped: Vec<(usize, usize)>,
}

/// Runs EM from `model0` until the relative log-likelihood change drops
/// below `opts.tol` or `opts.max_iter` M-steps have been taken. The
/// returned model's `trace` ends with its own log-likelihood.
pub fn fit<T: Real>(model0: &MixtureModel<T>, data: &MaskedMatrix<T>, opts: &FitOptions) -> Result<(MixtureModel<T>, FitReport), EmError> {
    if !(opts.tol > 0.0) {
        return Err(EmError::Config("tolerance must be positive".into()));
    }
    model0.check_data(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = model0.clone();
    model.trace.clear();
    let mut report = FitReport::default();
    let patterns = PatternIndex::new(data);
    let mut previous: Option<f64> = None;

    for iteration in 0..=opts.max_iter {
        let e = e_step(&model, data, &patterns).map_err(|err| match err {
            EmError::NonFinite { component, row, .. } => EmError::NonFinite { iteration, component, row },
            other => other,
        })?;
        let ll = e.loglik.as_f64();
        model.trace.push(ll);
        if let Some(prev) = previous {
            if ll < prev - MONOTONE_SLACK * (1.0 + prev.abs()) {
                log::warn!("iteration {iteration}: log-likelihood decreased from {prev} to {ll}");
            }
            if (ll - prev).abs() / (1.0 + ll.abs()) < opts.tol {
                report.converged = true;
                break;
            }
        }
        if iteration == opts.max_iter {
            break;
        }
        previous = Some(ll);

        let stage1 = m_step_stage1(&e, data, &mut rng);
        for &k in &stage1.reseeded {
            log::warn!("iteration {iteration}: component {k} lost all responsibility and was reseeded");
            report.reseeded.push((iteration, k));
        }
        let (next, clamped) = m_step_stage2(&e, data, &model, &stage1)?;
        for k in clamped {
            log::warn!("iteration {iteration}: noise variance of component {k} clamped to floor");
            report.noise_clamped.push((iteration, k));
        }
        model = MixtureModel { trace: std::mem::take(&mut model.trace), ..next };
        report.iterations = iteration + 1;
    }
    Ok((model, report))
}

/// Assigns each row to the component with the largest posterior given its
/// observed cells. Labels are zero-based.
pub fn classify<T: Real>(model: &MixtureModel<T>, data: &MaskedMatrix<T>) -> Result<Vec<usize>, EmError> {
    model.check_data(data)?;
    let e = e_step(model, data, &PatternIndex::new(data))?;
    Ok(e.responsibilities.argmax())
}
