//! Single probabilistic-PCA component.
//!
//! A component with mean `μ`, loadings `W` (d×q) and noise `σ²` is the
//! Gaussian `N(μ, W Wᵀ + σ² I)`. Everything here works on the observed
//! margin of that Gaussian: its log-density, and the conditional mean and
//! covariance of the unobserved coordinates.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::scalar::{ln_two_pi, Real};

/// Jitter attempts after the plain factorization fails.
const JITTER_ATTEMPTS: usize = 3;
const JITTER_START: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum PpcaError {
    #[error("noise variance must be positive, got {0}")]
    NonPositiveNoise(f64),
    #[error("latent dimension {q} must lie in 1..={d}")]
    LatentDim { q: usize, d: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("component {component}: observed covariance block is numerically singular")]
    Singular { component: usize },
    #[error("at least one coordinate must be observed")]
    NothingObserved,
}

/// One mixture component: weight `π`, mean `μ`, loadings `W`, noise `σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcaComponent<T: Real> {
    pub weight: T,
    pub mean: DVector<T>,
    pub loadings: DMatrix<T>,
    pub noise: T,
}

impl<T: Real> PpcaComponent<T> {
    pub fn new(weight: T, mean: DVector<T>, loadings: DMatrix<T>, noise: T) -> Result<Self, PpcaError> {
        let d = mean.len();
        let q = loadings.ncols();
        if loadings.nrows() != d {
            return Err(PpcaError::Shape(format!("loadings have {} rows, mean has {d}", loadings.nrows())));
        }
        if q < 1 || q > d {
            return Err(PpcaError::LatentDim { q, d });
        }
        if !(noise > T::zero()) {
            return Err(PpcaError::NonPositiveNoise(noise.as_f64()));
        }
        Ok(Self { weight, mean, loadings, noise })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.loadings.ncols()
    }

    /// `C = W Wᵀ + σ² I`.
    pub fn covariance(&self) -> DMatrix<T> {
        let mut c = &self.loadings * self.loadings.transpose();
        for i in 0..self.dim() {
            c[(i, i)] += self.noise;
        }
        c
    }

    /// `M = Wᵀ W + σ² I` (q×q).
    pub fn latent_precision(&self) -> DMatrix<T> {
        let mut m = self.loadings.transpose() * &self.loadings;
        for i in 0..self.latent_dim() {
            m[(i, i)] += self.noise;
        }
        m
    }
}

/// Observed and missing coordinate indices of one row, both ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObservationPattern {
    pub observed: Vec<usize>,
    pub missing: Vec<usize>,
}

impl ObservationPattern {
    pub fn from_mask(mask: &[bool]) -> Self {
        let (observed, missing) = (0..mask.len()).partition(|&j| mask[j]);
        Self { observed, missing }
    }

    pub fn dim(&self) -> usize {
        self.observed.len() + self.missing.len()
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Moments of the missing block given the observed one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments<T: Real> {
    /// `⟨x^m⟩`, ordered like the pattern's missing indices.
    pub cond_mean: DVector<T>,
    /// `Q = C^{mm} − C^{mo} (C^{oo})⁻¹ C^{om}`.
    pub cond_cov: DMatrix<T>,
    /// `log N(x^o; μ^o, C^{oo})`.
    pub obs_logdensity: T,
}

/// Everything about a (component, pattern) pair that does not depend on
/// the row: the factorized observed block, the regression gain and `Q`.
#[derive(Debug, Clone)]
pub struct PatternFactor<T: Real> {
    pattern: ObservationPattern,
    mean_obs: DVector<T>,
    mean_mis: DVector<T>,
    chol: Option<Cholesky<T, Dyn>>,
    /// `C^{mo} (C^{oo})⁻¹`, |m|×|o|.
    gain: DMatrix<T>,
    cond_cov: DMatrix<T>,
    /// `−½(|o| ln 2π + ln|C^{oo}|)`.
    log_norm: T,
    jitter: T,
}

impl<T: Real> PatternFactor<T> {
    /// Factorizes the observed block of `comp`'s covariance. An empty
    /// observed set is accepted here: the density is taken as 1 and the
    /// conditional moments are the prior ones. `index` only labels errors.
    pub fn new(comp: &PpcaComponent<T>, pattern: &ObservationPattern, index: usize) -> Result<Self, PpcaError> {
        if pattern.dim() != comp.dim() {
            return Err(PpcaError::Shape(format!("pattern covers {} coordinates, component has {}", pattern.dim(), comp.dim())));
        }
        let c = comp.covariance();
        let (o, m) = (&pattern.observed, &pattern.missing);
        let c_oo = DMatrix::from_fn(o.len(), o.len(), |i, j| c[(o[i], o[j])]);
        let c_mo = DMatrix::from_fn(m.len(), o.len(), |i, j| c[(m[i], o[j])]);
        let c_mm = DMatrix::from_fn(m.len(), m.len(), |i, j| c[(m[i], m[j])]);
        let mean_obs = DVector::from_iterator(o.len(), o.iter().map(|&j| comp.mean[j]));
        let mean_mis = DVector::from_iterator(m.len(), m.iter().map(|&j| comp.mean[j]));

        if o.is_empty() {
            return Ok(Self {
                pattern: pattern.clone(),
                mean_obs,
                mean_mis,
                chol: None,
                gain: DMatrix::zeros(m.len(), 0),
                cond_cov: c_mm,
                log_norm: T::zero(),
                jitter: T::zero(),
            });
        }

        let (chol, jitter) = factor_with_jitter(c_oo).ok_or(PpcaError::Singular { component: index })?;
        // gain = C^{mo} (C^{oo})⁻¹ = ((C^{oo})⁻¹ C^{om})ᵀ
        let gain = chol.solve(&c_mo.transpose()).transpose();
        let mut cond_cov = c_mm - &gain * c_mo.transpose();
        symmetrize(&mut cond_cov);
        let log_det = chol.l().diagonal().iter().fold(T::zero(), |acc, &v| acc + v.ln()) * T::lit(2.0);
        let log_norm = -(T::from_count(o.len()) * ln_two_pi::<T>() + log_det) * T::lit(0.5);
        Ok(Self { pattern: pattern.clone(), mean_obs, mean_mis, chol: Some(chol), gain, cond_cov, log_norm, jitter })
    }

    pub fn pattern(&self) -> &ObservationPattern {
        &self.pattern
    }

    /// Conditional covariance `Q` of the missing block.
    pub fn cond_cov(&self) -> &DMatrix<T> {
        &self.cond_cov
    }

    /// Diagonal jitter that had to be added to factorize `C^{oo}`.
    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// `x^o − μ^o` for a full-width row (missing cells ignored).
    fn centered_obs(&self, row: &[T]) -> DVector<T> {
        DVector::from_iterator(
            self.pattern.observed.len(),
            self.pattern.observed.iter().zip(self.mean_obs.iter()).map(|(&j, &mu)| row[j] - mu),
        )
    }

    /// `log N(x^o; μ^o, C^{oo})` for a full-width row.
    pub fn log_density(&self, row: &[T]) -> T {
        match &self.chol {
            None => T::zero(),
            Some(chol) => {
                let diff = self.centered_obs(row);
                let y = chol.l_dirty().solve_lower_triangular(&diff).expect("triangular factor is nonsingular");
                self.log_norm - y.norm_squared() * T::lit(0.5)
            }
        }
    }

    /// Writes `⟨x^m⟩` into `out` (length |m|).
    pub fn cond_mean_into(&self, row: &[T], out: &mut [T]) {
        let diff = self.centered_obs(row);
        let shift = &self.gain * diff;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.mean_mis[i] + shift[i];
        }
    }

    /// Both moments and the observed-margin density for one row.
    pub fn condition_row(&self, row: &[T]) -> ConditionalMoments<T> {
        let mut mean = vec![T::zero(); self.pattern.missing.len()];
        self.cond_mean_into(row, &mut mean);
        ConditionalMoments { cond_mean: DVector::from_vec(mean), cond_cov: self.cond_cov.clone(), obs_logdensity: self.log_density(row) }
    }
}

/// Cholesky of `a`, retrying with diagonal jitter `1e-10·tr/n`, growing
/// tenfold, for up to three attempts. Returns the factor and the jitter used.
pub fn factor_with_jitter<T: Real>(a: DMatrix<T>) -> Option<(Cholesky<T, Dyn>, T)> {
    if let Some(ch) = Cholesky::new(a.clone()) {
        return Some((ch, T::zero()));
    }
    let n = a.nrows();
    let scale = (a.trace() / T::from_count(n)).abs();
    let mut jitter = T::lit(JITTER_START) * if scale > T::zero() { scale } else { T::one() };
    for _ in 0..JITTER_ATTEMPTS {
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(b) {
            return Some((ch, jitter));
        }
        jitter *= T::lit(10.0);
    }
    None
}

pub(crate) fn symmetrize<T: Real>(a: &mut DMatrix<T>) {
    let n = a.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in i + 1..n {
            let v = (a[(i, j)] + a[(j, i)]) * half;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Conditions `comp` on the observed values of `row` (full width; only the
/// cells flagged in `observed` are read).
pub fn condition<T: Real>(comp: &PpcaComponent<T>, row: &[T], observed: &[bool]) -> Result<ConditionalMoments<T>, PpcaError> {
    if row.len() != comp.dim() || observed.len() != comp.dim() {
        return Err(PpcaError::Shape(format!("row of width {} for a {}-dimensional component", row.len(), comp.dim())));
    }
    let pattern = ObservationPattern::from_mask(observed);
    if pattern.observed.is_empty() {
        return Err(PpcaError::NothingObserved);
    }
    Ok(PatternFactor::new(comp, &pattern, 0)?.condition_row(row))
}

type FactorKey = (usize, Vec<bool>);

/// Factorizations keyed by (component index, observation mask). Readers
/// share the lock; a miss takes the write lock once to insert.
#[derive(Debug, Default)]
pub struct FactorCache<T: Real> {
    inner: RwLock<HashMap<FactorKey, Arc<PatternFactor<T>>>>,
}

impl<T: Real> FactorCache<T> {
    pub fn new() -> Self {
        Self { inner: RwLock::new(HashMap::new()) }
    }

    pub fn get_or_insert(&self, index: usize, comp: &PpcaComponent<T>, mask: &[bool]) -> Result<Arc<PatternFactor<T>>, PpcaError> {
        let key = (index, mask.to_vec());
        if let Some(f) = self.inner.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(f));
        }
        let factor = Arc::new(PatternFactor::new(comp, &ObservationPattern::from_mask(mask), index)?);
        let mut w = self.inner.write().expect("cache lock");
        Ok(Arc::clone(w.entry(key).or_insert(factor)))
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.inner.write().expect("cache lock").clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn comp(mean: &[f64], w: DMatrix<f64>, noise: f64) -> PpcaComponent<f64> {
        PpcaComponent::new(1.0, DVector::from_column_slice(mean), w, noise).unwrap()
    }

    #[test]
    fn zero_loadings_give_isotropic_covariance() {
        let c = comp(&[0.0; 3], DMatrix::zeros(3, 1), 2.0);
        assert_eq!(c.covariance(), DMatrix::identity(3, 3) * 2.0);
    }

    #[test]
    fn rank_one_covariance() {
        let c = comp(&[0.0; 2], DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), 1.0);
        assert_eq!(c.covariance(), DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
    }

    #[test]
    fn invalid_components_are_rejected() {
        let w = DMatrix::zeros(2, 1);
        assert!(matches!(PpcaComponent::new(1.0, DVector::zeros(2), w.clone(), 0.0), Err(PpcaError::NonPositiveNoise(_))));
        assert!(matches!(PpcaComponent::new(1.0, DVector::zeros(2), DMatrix::zeros(2, 3), 1.0), Err(PpcaError::LatentDim { q: 3, d: 2 })));
    }

    #[test]
    fn schur_complement_two_by_two() {
        // C = [[2,1],[1,2]], observe x1 = 1: mean 1/2, variance 2 - 1/2.
        let c = comp(&[0.0, 0.0], DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), 1.0);
        let m = condition(&c, &[1.0, 0.0], &[true, false]).unwrap();
        assert!((m.cond_mean[0] - 0.5).abs() < 1e-14);
        assert!((m.cond_cov[(0, 0)] - 1.5).abs() < 1e-14);
        let direct = -0.5 * ((2.0 * std::f64::consts::PI).ln() + 2f64.ln() + 0.5);
        assert!((m.obs_logdensity - direct).abs() < 1e-14);
    }

    #[test]
    fn diagonal_covariance_ignores_observation() {
        let c = comp(&[1.0, 2.0, 3.0], DMatrix::zeros(3, 1), 0.7);
        let m = condition(&c, &[10.0, 0.0, -4.0], &[true, false, true]).unwrap();
        assert_eq!(m.cond_mean.as_slice(), &[2.0]);
        assert!((m.cond_cov[(0, 0)] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn centered_observation_returns_prior_mean() {
        let w = DMatrix::from_row_slice(4, 2, &[1.0, 0.3, -0.5, 2.0, 0.2, 0.1, 1.5, -1.0]);
        let c = comp(&[1.0, -2.0, 0.5, 4.0], w, 0.3);
        let row = [1.0, 0.0, 0.5, 0.0];
        let m = condition(&c, &row, &[true, false, true, false]).unwrap();
        assert!((m.cond_mean[0] + 2.0).abs() < 1e-13 && (m.cond_mean[1] - 4.0).abs() < 1e-13);
    }

    #[test]
    fn full_mask_is_the_plain_gaussian_density() {
        let w = DMatrix::from_row_slice(3, 1, &[1.0, -0.5, 0.25]);
        let c = comp(&[0.5, 1.0, -1.0], w, 0.4);
        let x = [1.0, 0.0, 0.0];
        let m = condition(&c, &x, &[true; 3]).unwrap();
        assert_eq!((m.cond_mean.len(), m.cond_cov.nrows()), (0, 0));
        let cov = c.covariance();
        let diff = DVector::from_column_slice(&x) - &c.mean;
        let quad = (diff.transpose() * cov.clone().try_inverse().unwrap() * &diff)[(0, 0)];
        let direct = -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad);
        assert!((m.obs_logdensity - direct).abs() < 1e-12);
    }

    #[test]
    fn nothing_observed_is_an_error() {
        let c = comp(&[0.0; 2], DMatrix::zeros(2, 1), 1.0);
        assert_eq!(condition(&c, &[0.0, 0.0], &[false, false]).unwrap_err(), PpcaError::NothingObserved);
    }

    #[test]
    fn jitter_rescues_a_nearly_singular_block() {
        let mut a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        a[(1, 1)] -= 1e-14;
        let (_, jitter) = factor_with_jitter(a).unwrap();
        assert!(jitter > 0.0);
        assert!(factor_with_jitter(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_none());
    }

    #[test]
    fn cache_reuses_factors() {
        let c = comp(&[0.0; 3], DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]), 1.0);
        let cache = FactorCache::new();
        let a = cache.get_or_insert(0, &c, &[true, false, true]).unwrap();
        let b = cache.get_or_insert(0, &c, &[true, false, true]).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        cache.get_or_insert(1, &c, &[true, false, true]).unwrap();
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn single_precision_conditioning() {
        let c = PpcaComponent::<f32>::new(1.0, DVector::zeros(2), DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), 1.0).unwrap();
        let m = condition(&c, &[1.0, 0.0], &[true, false]).unwrap();
        assert!((m.cond_mean[0] - 0.5).abs() < 1e-6);
    }

    fn arb_component() -> impl Strategy<Value = (PpcaComponent<f64>, Vec<bool>, Vec<f64>)> {
        (2usize..7).prop_flat_map(|d| {
            (1..d).prop_flat_map(move |q| {
                (
                    proptest::collection::vec(-3.0f64..3.0, d * q),
                    proptest::collection::vec(-5.0f64..5.0, d),
                    0.05f64..2.0,
                    proptest::collection::vec(any::<bool>(), d),
                    proptest::collection::vec(-5.0f64..5.0, d),
                )
                    .prop_map(move |(w, mu, s2, mut mask, x)| {
                        mask[0] = true;
                        let c = PpcaComponent::new(1.0, DVector::from_vec(mu), DMatrix::from_vec(d, q, w), s2).unwrap();
                        (c, mask, x)
                    })
            })
        })
    }

    proptest! {
        #[test]
        fn loading_part_of_covariance_has_rank_at_most_q((c, _, _) in arb_component()) {
            let mut low = c.covariance();
            for i in 0..c.dim() { low[(i, i)] -= c.noise; }
            let sv = low.singular_values();
            let scale = sv.max().max(1.0);
            let rank = sv.iter().filter(|&&s| s > 1e-10 * scale).count();
            prop_assert!(rank <= c.latent_dim());
            let eig = SymmetricEigen::new(c.covariance()).eigenvalues;
            prop_assert!(eig.iter().all(|&l| l >= c.noise - 1e-10 * scale));
        }

        #[test]
        fn conditioning_never_increases_variance((c, mask, x) in arb_component()) {
            let m = condition(&c, &x, &mask).unwrap();
            let pattern = ObservationPattern::from_mask(&mask);
            if pattern.missing.is_empty() { return Ok(()); }
            let cov = c.covariance();
            let c_mm = DMatrix::from_fn(pattern.missing.len(), pattern.missing.len(), |i, j| cov[(pattern.missing[i], pattern.missing[j])]);
            let scale = c_mm.norm().max(1.0);
            let q_eig = SymmetricEigen::new(m.cond_cov.clone()).eigenvalues;
            prop_assert!(q_eig.iter().all(|&l| l >= -1e-10 * scale));
            let gap = SymmetricEigen::new(c_mm - &m.cond_cov).eigenvalues;
            prop_assert!(gap.iter().all(|&l| l >= -1e-10 * scale));
        }
    }
}
