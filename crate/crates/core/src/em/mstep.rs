use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::estep::EStep;
use super::{EmError, MixtureModel, DEAD_COMPONENT_MASS, NOISE_FLOOR_REL};
use crate::data::MaskedMatrix;
use crate::ppca::{symmetrize, PpcaComponent};
use crate::scalar::Real;

/// Weights and means after the first maximization stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1<T: Real> {
    pub weights: Vec<T>,
    pub means: Vec<DVector<T>>,
    /// `Σ_n ⟨z_nk⟩` per component.
    pub resp_sums: Vec<T>,
    /// Components that had (numerically) no responsibility and were
    /// re-initialized around the global mean.
    pub reseeded: Vec<usize>,
}

/// `π̂_k = (1/N) Σ_n ⟨z_nk⟩` and `μ̂_k`, the responsibility-weighted mean of
/// rows completed with `⟨x^m⟩` under component k.
pub fn m_step_stage1<T: Real, R: Rng>(e: &EStep<T>, data: &MaskedMatrix<T>, rng: &mut R) -> Stage1<T> {
    let n = T::from_count(data.nrows());
    let k_count = e.n_components();
    let resp = e.responsibilities.matrix();

    let (resp_sums, weighted): (Vec<T>, Vec<DVector<T>>) = (0..k_count)
        .into_par_iter()
        .map(|k| {
            let r = resp.column(k);
            let sum = r.iter().fold(T::zero(), |a, &v| a + v);
            (sum, e.completed(k).transpose() * r)
        })
        .unzip();

    // Σ_k Σ_n ⟨z_nk⟩ equals N up to rounding; dividing by the computed
    // total keeps Σπ̂ = 1 to machine precision for any N.
    let mass = resp_sums.iter().fold(T::zero(), |a, &s| a + s);
    let mut weights: Vec<T> = resp_sums.iter().map(|&s| s / mass).collect();
    let mut means: Vec<DVector<T>> = weighted.iter().zip(&resp_sums).map(|(w, &s)| if s > T::zero() { w / s } else { w.clone() }).collect();

    let reseeded: Vec<usize> = (0..k_count).filter(|&k| resp_sums[k] < T::lit(DEAD_COMPONENT_MASS)).collect();
    if !reseeded.is_empty() {
        let global = weighted.iter().fold(DVector::zeros(data.ncols()), |a, w| a + w) / n;
        let spread = global_average_variance(e, &global, n).sqrt() * T::lit(0.05);
        for &k in &reseeded {
            let noise = DVector::from_fn(data.ncols(), |_, _| T::lit(StandardNormal.sample(rng)));
            means[k] = &global + noise * spread;
            weights[k] = T::one() / T::from_count(2 * k_count);
        }
        let total = weights.iter().fold(T::zero(), |a, &w| a + w);
        weights.iter_mut().for_each(|w| *w /= total);
    }
    Stage1 { weights, means, resp_sums, reseeded }
}

fn global_average_variance<T: Real>(e: &EStep<T>, global: &DVector<T>, n: T) -> T {
    let cov = global_covariance(e, global, n);
    cov.trace() / T::from_count(cov.nrows())
}

/// `(1/N) Σ_k Σ_n ⟨z_nk⟩ ⟨(x_n − g)(x_n − g)ᵀ⟩_k` around the global mean `g`.
fn global_covariance<T: Real>(e: &EStep<T>, global: &DVector<T>, n: T) -> DMatrix<T> {
    let d = global.len();
    let mut acc = DMatrix::zeros(d, d);
    for k in 0..e.n_components() {
        acc += local_scatter(e, k, global);
    }
    acc / n
}

/// `Σ_n ⟨z_nk⟩ ⟨(x_n − c)(x_n − c)ᵀ⟩` for component k around `center`,
/// including the `Q` correction on each row's missing block.
fn local_scatter<T: Real>(e: &EStep<T>, k: usize, center: &DVector<T>) -> DMatrix<T> {
    let resp = e.responsibilities.matrix().column(k);
    let completed = e.completed(k);
    let (n, d) = completed.shape();
    let mut centered = completed.clone();
    for j in 0..d {
        let c = center[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= c);
    }
    let mut weighted = centered.clone();
    for r in 0..n {
        let w = resp[r];
        weighted.row_mut(r).iter_mut().for_each(|v| *v *= w);
    }
    let mut s = centered.transpose() * weighted;

    let mut pattern_mass = vec![T::zero(); e.patterns.len()];
    for (r, &p) in e.patterns.row_pattern.iter().enumerate() {
        pattern_mass[p] += resp[r];
    }
    for (p, pattern) in e.patterns.patterns.iter().enumerate() {
        if pattern.missing.is_empty() {
            continue;
        }
        let q = e.cond_cov(p, k);
        for (a, &i) in pattern.missing.iter().enumerate() {
            for (b, &j) in pattern.missing.iter().enumerate() {
                s[(i, j)] += pattern_mass[p] * q[(a, b)];
            }
        }
    }
    symmetrize(&mut s);
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStats<T: Real> {
    pub resp_sum: T,
    pub mean: DVector<T>,
    /// `S_k = (1/(N π̂_k)) Σ_n ⟨z_nk⟩ ⟨(x_n − μ̂_k)(x_n − μ̂_k)ᵀ⟩`.
    pub local_cov: DMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats<T: Real> {
    pub components: Vec<ComponentStats<T>>,
}

/// Local covariances around the stage-1 means.
pub fn sufficient_stats<T: Real>(e: &EStep<T>, stage1: &Stage1<T>) -> SufficientStats<T> {
    let components = (0..e.n_components())
        .into_par_iter()
        .map(|k| {
            let s = stage1.resp_sums[k];
            let scatter = local_scatter(e, k, &stage1.means[k]);
            ComponentStats { resp_sum: s, mean: stage1.means[k].clone(), local_cov: if s > T::zero() { scatter / s } else { scatter } }
        })
        .collect();
    SufficientStats { components }
}

/// Loadings and noise from the local covariance `S` and the previous
/// `W`, `σ²`:
/// `Ŵ = S W (σ² I + M⁻¹ Wᵀ S W)⁻¹`, `σ̂² = tr(S − S W M⁻¹ Ŵᵀ) / d`.
/// Returns the new pair and whether `σ̂²` hit the floor.
pub(crate) fn update_loadings<T: Real>(s: &DMatrix<T>, w: &DMatrix<T>, noise: T) -> Result<(DMatrix<T>, T, bool), EmError> {
    let d = s.nrows();
    let q = w.ncols();
    let mut m = w.transpose() * w;
    for i in 0..q {
        m[(i, i)] += noise;
    }
    let m_inv = m.cholesky().ok_or_else(|| EmError::Config("latent precision is not positive definite".into()))?.inverse();
    let sw = s * w;
    let mut inner = &m_inv * w.transpose() * &sw;
    for i in 0..q {
        inner[(i, i)] += noise;
    }
    // Ŵ = SW inner⁻¹  ⇔  innerᵀ Ŵᵀ = (SW)ᵀ
    let w_new =
        inner.transpose().lu().solve(&sw.transpose()).ok_or_else(|| EmError::Config("loading update is singular".into()))?.transpose();
    let trace_s = s.trace();
    let noise_new = (trace_s - (sw * m_inv * w_new.transpose()).trace()) / T::from_count(d);
    let mut floor = T::lit(NOISE_FLOOR_REL) * trace_s / T::from_count(d);
    if !(floor > T::zero()) {
        floor = T::lit(NOISE_FLOOR_REL);
    }
    if noise_new < floor || !noise_new.is_finite_value() {
        Ok((w_new, floor, true))
    } else {
        Ok((w_new, noise_new, false))
    }
}

/// Second stage: builds `S_k` around the stage-1 means and moves `W_k`
/// and `σ²_k`. Reseeded components take their loadings from the global
/// covariance instead. Returns the updated model and the components whose
/// noise was clamped to the floor.
pub fn m_step_stage2<T: Real>(
    e: &EStep<T>,
    data: &MaskedMatrix<T>,
    model: &MixtureModel<T>,
    stage1: &Stage1<T>,
) -> Result<(MixtureModel<T>, Vec<usize>), EmError> {
    let stats = sufficient_stats(e, stage1);
    let updates: Vec<(DMatrix<T>, T, bool)> = (0..model.n_components())
        .into_par_iter()
        .map(|k| update_loadings(&stats.components[k].local_cov, &model.components[k].loadings, model.components[k].noise))
        .collect::<Result<_, _>>()?;

    let reseed = if stage1.reseeded.is_empty() {
        None
    } else {
        let n = T::from_count(data.nrows());
        let global = stage1.resp_sums.iter().zip(&stage1.means).fold(DVector::zeros(model.dim()), |a, (&s, m)| a + m * s) / n;
        Some(loadings_from_covariance(&global_covariance(e, &global, n), model.latent_dim))
    };

    let mut components = Vec::with_capacity(model.n_components());
    let mut clamped = Vec::new();
    for (k, (w, noise, hit_floor)) in updates.into_iter().enumerate() {
        let (w, noise) = match (&reseed, stage1.reseeded.contains(&k)) {
            (Some((gw, gn)), true) => (gw.clone(), *gn),
            _ => {
                if hit_floor {
                    clamped.push(k);
                }
                (w, noise)
            }
        };
        components.push(PpcaComponent::new(stage1.weights[k], stage1.means[k].clone(), w, noise)?);
    }
    let mut next = MixtureModel::new(components, model.columns.clone())?;
    next.trace = model.trace.clone();
    Ok((next, clamped))
}

/// Loadings from the leading eigenpairs of a covariance, with the noise
/// set to the average variance `tr(C)/d`.
fn loadings_from_covariance<T: Real>(c: &DMatrix<T>, q: usize) -> (DMatrix<T>, T) {
    let d = c.nrows();
    let noise = (c.trace() / T::from_count(d)).max(T::lit(NOISE_FLOOR_REL));
    let eig = SymmetricEigen::new(c.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let eps = noise * T::lit(1e-6);
    let w = DMatrix::from_fn(d, q, |i, l| {
        let j = order[l];
        eig.eigenvectors[(i, j)] * (eig.eigenvalues[j] - noise).max(eps).sqrt()
    });
    (w, noise)
}
