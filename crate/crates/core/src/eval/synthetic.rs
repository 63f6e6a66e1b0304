//! Seeded synthetic data with known cluster membership.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::{FilePattern, FileTag, MaskedMatrix};
use crate::panel::{initial_means, PanelConfig};
use crate::scalar::Real;

/// Draws from a Gaussian mixture with the stored component labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled<T: Real> {
    pub data: MaskedMatrix<T>,
    /// Zero-based generating component per row.
    pub labels: Vec<usize>,
}

/// Gaussian mixture used as ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub columns: Vec<String>,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    /// `n` rows; component counts are drawn row by row from the weights.
    pub fn sample<T: Real>(&self, n: usize, seed: u64) -> Result<Labeled<T>, EvalError> {
        let d = self.columns.len();
        let factors: Vec<DMatrix<f64>> = self
            .covariances
            .iter()
            .map(|c| c.clone().cholesky().map(|ch| ch.l()).ok_or_else(|| EvalError::Shape("covariance is not positive definite".into())))
            .collect::<Result<_, _>>()?;
        let total: f64 = self.weights.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut u = rng.random::<f64>() * total;
            let mut k = self.weights.len() - 1;
            for (i, &w) in self.weights.iter().enumerate() {
                if u < w {
                    k = i;
                    break;
                }
                u -= w;
            }
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let x = &self.means[k] + &factors[k] * z;
            values.extend(x.iter().map(|&v| T::lit(v)));
            labels.push(k);
        }
        let data = MaskedMatrix::new(self.columns.clone(), values, vec![true; n * d], vec![FileTag::Unassigned; n])
            .map_err(|e| EvalError::Shape(e.to_string()))?;
        Ok(Labeled { data, labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    /// Half the separation of the two clusters along `c`.
    pub common_offset: f64,
    pub common_sd: f64,
    /// Half the separation along each specific coordinate.
    pub specific_offset: f64,
    pub specific_sd: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { common_offset: 0.5, common_sd: 1.0, specific_offset: 3.0, specific_sd: 0.5 }
    }
}

impl ToySpec {
    /// Two equally weighted clusters over (c, s1, s2), separated in every
    /// coordinate but overlapping heavily along `c`.
    pub fn mixture(&self) -> GaussianMixture {
        let diag =
            DMatrix::from_diagonal(&DVector::from_vec(vec![self.common_sd.powi(2), self.specific_sd.powi(2), self.specific_sd.powi(2)]));
        let (a, b) = (self.common_offset, self.specific_offset);
        GaussianMixture {
            columns: toy_columns(),
            weights: vec![0.5, 0.5],
            means: vec![DVector::from_vec(vec![-a, -b, -b]), DVector::from_vec(vec![a, b, b])],
            covariances: vec![diag.clone(), diag],
        }
    }
}

pub fn toy_columns() -> Vec<String> {
    vec!["c".into(), "s1".into(), "s2".into()]
}

/// c common, s1 in file 1, s2 in file 2.
pub fn toy_pattern() -> FilePattern {
    FilePattern { common: vec!["c".into()], specific1: vec!["s1".into()], specific2: vec!["s2".into()] }
}

/// FS, SS, CD56 common; CD16, CD3 in file 1; CD8, CD4 in file 2.
pub fn lymph_node_pattern() -> FilePattern {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
    FilePattern { common: s(&["FS", "SS", "CD56"]), specific1: s(&["CD16", "CD3"]), specific2: s(&["CD8", "CD4"]) }
}

/// Relative abundance of the lymph-node cell types, in panel order.
pub const LYMPH_NODE_WEIGHTS: [f64; 6] = [0.05, 0.05, 0.35, 0.20, 0.25, 0.10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSpec {
    /// One per cell type; empty means equal weights.
    pub weights: Vec<f64>,
    /// Per-marker standard deviations are drawn uniformly from this range.
    pub sd_range: (f64, f64),
    /// Seed for the covariance draws (independent of the sampling seed).
    pub covariance_seed: u64,
}

impl Default for PanelSpec {
    fn default() -> Self {
        Self { weights: LYMPH_NODE_WEIGHTS.to_vec(), sd_range: (25.0, 45.0), covariance_seed: 7 }
    }
}

impl PanelSpec {
    /// Mixture with one component per cell type, centered on the panel's
    /// initial means, with seeded random correlation and spread.
    pub fn mixture(&self, panel: &PanelConfig) -> Result<GaussianMixture, EvalError> {
        let means = initial_means::<f64>(panel).map_err(|e| EvalError::Shape(e.to_string()))?;
        let k = means.len();
        let d = panel.markers().len();
        let weights = if self.weights.is_empty() { vec![1.0 / k as f64; k] } else { self.weights.clone() };
        if weights.len() != k {
            return Err(EvalError::Shape(format!("{} weights for {k} cell types", weights.len())));
        }
        let (lo, hi) = self.sd_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(EvalError::Shape(format!("invalid standard deviation range ({lo}, {hi})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.covariance_seed);
        let covariances = (0..k).map(|_| random_covariance(&mut rng, d, lo, hi)).collect();
        Ok(GaussianMixture { columns: panel.markers().to_vec(), weights, means, covariances })
    }
}

/// Correlation from `A Aᵀ + d I` (A standard normal), rescaled to
/// standard deviations drawn from `[lo, hi]`.
fn random_covariance<R: Rng>(rng: &mut R, d: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let a: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let mut s = &a * a.transpose();
    for i in 0..d {
        s[(i, i)] += d as f64;
    }
    let sd: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
    DMatrix::from_fn(d, d, |i, j| s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt() * sd[i] * sd[j])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_sample_is_seeded_and_labeled() {
        let mix = ToySpec::default().mixture();
        let a = mix.sample::<f64>(500, 3).unwrap();
        let b = mix.sample::<f64>(500, 3).unwrap();
        assert_eq!(a, b);
        let c = mix.sample::<f64>(500, 4).unwrap();
        assert_ne!(a.data, c.data);
        for (r, &l) in a.labels.iter().enumerate() {
            let s1 = a.data.get(r, 1).unwrap();
            assert_eq!(l == 1, s1 > 0.0, "row {r}");
        }
    }

    #[test]
    fn panel_mixture_centers_and_spread() {
        let panel = PanelConfig::lymph_node();
        let mix = PanelSpec::default().mixture(&panel).unwrap();
        assert_eq!(mix.means.len(), 6);
        assert_eq!(mix.means[2].as_slice(), &[400.0, 400.0, 240.0, 130.0, 550.0, 170.0, 650.0]);
        for c in &mix.covariances {
            for i in 0..7 {
                let sd = c[(i, i)].sqrt();
                assert!((25.0 - 1e-9..=45.0 + 1e-9).contains(&sd), "{sd}");
            }
            assert!(c.clone().cholesky().is_some());
        }
        let s = mix.sample::<f64>(20_000, 1).unwrap();
        let frac = s.labels.iter().filter(|&&l| l == 2).count() as f64 / 20_000.0;
        assert!((frac - 0.35).abs() < 0.02, "{frac}");
    }
}
