//! Starting point for EM from expert-supplied component means.
//!
//! Rows go to their nearest mean (observed coordinates only). Each
//! component's covariance is assembled entry by entry from whatever column
//! pairs its rows jointly observe; pairs never observed together are filled
//! with seeded uniform draws, and the result is pushed onto the positive
//! definite cone before the eigen-split into loadings and noise.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmError, MixtureModel};
use crate::data::MaskedMatrix;
use crate::ppca::{symmetrize, PpcaComponent};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    pub latent_dim: usize,
    pub seed: u64,
    /// Eigenvalue floor for the repair step, relative to `tr(C)/d`.
    pub floor_rel: f64,
}

impl InitOptions {
    pub fn new(latent_dim: usize, seed: u64) -> Self {
        Self { latent_dim, seed, floor_rel: 1e-6 }
    }
}

/// Intermediate quantities of the initialization, for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct InitReport<T: Real> {
    /// Nearest-mean component of every row.
    pub assignments: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    /// Per component: which covariance entries came from data.
    pub estimable: Vec<DMatrix<bool>>,
    /// Per component: covariance before the positive-definite repair.
    pub pre_repair: Vec<DMatrix<T>>,
    /// Per component: half-width `r` of the uniform `[−r, r]` fill.
    pub random_range: Vec<T>,
    /// Components that fell back to global statistics.
    pub fallback: Vec<bool>,
}

/// Builds the initial mixture from `means` (one per component, in data
/// column order).
pub fn init_model<T: Real>(
    data: &MaskedMatrix<T>,
    means: &[DVector<T>],
    opts: &InitOptions,
) -> Result<(MixtureModel<T>, InitReport<T>), EmError> {
    let d = data.ncols();
    let k_count = means.len();
    let q = opts.latent_dim;
    if k_count == 0 {
        return Err(EmError::Config("at least one component mean is required".into()));
    }
    if q == 0 || q >= d {
        return Err(EmError::Config(format!("latent dimension {q} must satisfy 1 <= q < d = {d}")));
    }
    if let Some(bad) = means.iter().position(|m| m.len() != d) {
        return Err(EmError::Shape(format!("mean {bad} has dimension {}, data has {d}", means[bad].len())));
    }

    // 1. nearest mean on observed coordinates
    let assignments: Vec<usize> = (0..data.nrows())
        .map(|r| {
            let (row, mask) = (data.row_values(r), data.row_mask(r));
            let dist = |m: &DVector<T>| (0..d).filter(|&j| mask[j]).fold(T::zero(), |a, j| a + (row[j] - m[j]) * (row[j] - m[j]));
            let mut best = 0;
            let mut best_d = dist(&means[0]);
            for (k, m) in means.iter().enumerate().skip(1) {
                let dk = dist(m);
                if dk < best_d {
                    best = k;
                    best_d = dk;
                }
            }
            best
        })
        .collect();
    let mut members = vec![Vec::new(); k_count];
    for (r, &k) in assignments.iter().enumerate() {
        members[k].push(r);
    }
    let cluster_sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let all_rows: Vec<usize> = (0..data.nrows()).collect();
    let global = pairwise_covariance(data, &all_rows);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut weights = Vec::with_capacity(k_count);
    let mut report = InitReport {
        assignments,
        cluster_sizes: cluster_sizes.clone(),
        estimable: Vec::with_capacity(k_count),
        pre_repair: Vec::with_capacity(k_count),
        random_range: Vec::with_capacity(k_count),
        fallback: Vec::with_capacity(k_count),
    };
    let mut covariances = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let fallback = cluster_sizes[k] < q + 1;
        let (cov, estimable) = if fallback { global.clone() } else { pairwise_covariance(data, &members[k]) };
        if fallback {
            log::warn!("initial component {k} has {} rows; using global covariance", cluster_sizes[k]);
        }

        // 2. random symmetric fill, drawn for every entry to keep the
        // stream independent of which entries are estimable
        let diag: Vec<T> = (0..d).filter(|&j| estimable[(j, j)]).map(|j| cov[(j, j)]).collect();
        let range = if diag.is_empty() { T::one() } else { diag.iter().fold(T::zero(), |a, &v| a + v) / T::from_count(diag.len()) };
        let mut c = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let u: f64 = rng.random_range(-1.0..=1.0);
                c[(i, j)] = T::lit(u) * range;
                c[(j, i)] = c[(i, j)];
            }
        }
        // 3. overwrite what the data can estimate
        for i in 0..d {
            for j in 0..d {
                if estimable[(i, j)] {
                    c[(i, j)] = cov[(i, j)];
                }
            }
        }
        report.pre_repair.push(c.clone());
        report.estimable.push(estimable);
        report.random_range.push(range);
        report.fallback.push(fallback);
        covariances.push(c);

        // 5. weight from the cluster share
        weights.push(if fallback {
            T::one() / T::from_count(2 * k_count)
        } else {
            T::from_count(cluster_sizes[k]) / T::from_count(data.nrows())
        });
    }
    let total = weights.iter().fold(T::zero(), |a, &w| a + w);

    let mut components = Vec::with_capacity(k_count);
    for (k, c) in covariances.into_iter().enumerate() {
        // 4. repair
        let floor = T::lit(opts.floor_rel) * (c.trace() / T::from_count(d)).abs().max(T::lit(1e-300_f64.max(f64::MIN_POSITIVE)));
        let repaired = repair_positive_definite(&c, floor);
        // 6-7. eigen-split
        let (w, noise) = split_covariance(&repaired, q, floor);
        components.push(PpcaComponent::new(weights[k] / total, means[k].clone(), w, noise)?);
    }
    Ok((MixtureModel::new(components, data.columns().to_vec())?, report))
}

/// Sample covariance over jointly observed pairs. Entry (i, j) uses the
/// rows observing both columns, centered on those rows' own means, with an
/// `n − 1` denominator; it is estimable when at least two such rows exist.
fn pairwise_covariance<T: Real>(data: &MaskedMatrix<T>, rows: &[usize]) -> (DMatrix<T>, DMatrix<bool>) {
    let d = data.ncols();
    let mut cov = DMatrix::zeros(d, d);
    let mut estimable = DMatrix::from_element(d, d, false);
    for i in 0..d {
        for j in i..d {
            let (mut n, mut si, mut sj) = (0usize, T::zero(), T::zero());
            for &r in rows {
                if let (Some(a), Some(b)) = (data.get(r, i), data.get(r, j)) {
                    n += 1;
                    si += a;
                    sj += b;
                }
            }
            if n < 2 {
                continue;
            }
            let (mi, mj) = (si / T::from_count(n), sj / T::from_count(n));
            let mut acc = T::zero();
            for &r in rows {
                if let (Some(a), Some(b)) = (data.get(r, i), data.get(r, j)) {
                    acc += (a - mi) * (b - mj);
                }
            }
            let v = acc / T::from_count(n - 1);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
            estimable[(i, j)] = true;
            estimable[(j, i)] = true;
        }
    }
    (cov, estimable)
}

/// Symmetrizes `c` and raises every eigenvalue below `floor` to it,
/// keeping the eigenvectors. Matrices already at or above the floor come
/// back as their symmetric part, untouched.
pub fn repair_positive_definite<T: Real>(c: &DMatrix<T>, floor: T) -> DMatrix<T> {
    let mut sym = c.clone();
    symmetrize(&mut sym);
    let d = sym.nrows();
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let scale = eig.eigenvalues.iter().fold(floor, |a, &l| a.max(l.abs()));
    // Reconstruction perturbs eigenvalues by O(d·ε·scale); aim above the
    // floor by more than that.
    let margin = T::lit(64.0) * T::default_epsilon() * scale * T::from_count(d.max(1));
    let target = floor + margin;
    let clamped = eig.eigenvalues.map(|l| if l < target { target } else { l });
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    for _ in 0..4 {
        let min = SymmetricEigen::new(out.clone()).eigenvalues.min();
        if min >= floor {
            break;
        }
        for i in 0..d {
            out[(i, i)] += floor - min + margin;
        }
    }
    out
}

/// `σ²` = mean of the trailing `d − q` eigenvalues; `W` = leading
/// eigenvectors scaled by `sqrt(max(λ − σ², eps))`.
fn split_covariance<T: Real>(c: &DMatrix<T>, q: usize, eps: T) -> (DMatrix<T>, T) {
    let d = c.nrows();
    let eig = SymmetricEigen::new(c.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let rest = order[q..].iter().fold(T::zero(), |a, &j| a + eig.eigenvalues[j]);
    let noise = (rest / T::from_count(d - q)).max(eps);
    let w = DMatrix::from_fn(d, q, |i, l| {
        let j = order[l];
        eig.eigenvectors[(i, j)] * (eig.eigenvalues[j] - noise).max(eps).sqrt()
    });
    (w, noise)
}

#[cfg(test)]
pub(crate) fn pairwise_covariance_for_tests<T: Real>(data: &MaskedMatrix<T>, rows: &[usize]) -> (DMatrix<T>, DMatrix<bool>) {
    pairwise_covariance(data, rows)
}
