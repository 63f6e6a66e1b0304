use serde::{Deserialize, Serialize};

use super::kde::KdeModel;
use super::EvalError;
use crate::data::MaskedMatrix;
use crate::scalar::Real;

/// Empirical `KL(g‖f) ≈ (1/N_e) Σ_n [log ĝ(x̂_n) − log f̂(x̂_n)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub value: f64,
    pub terms: Vec<f64>,
    pub n_eval: usize,
    pub method: String,
    pub kernel: String,
    pub bandwidth_imputed: Vec<f64>,
    pub bandwidth_truth: Vec<f64>,
}

/// `ĝ` is fitted on `imputed`, `f̂` on `truth`, and both are evaluated at
/// the rows of `eval_points`.
pub fn empirical_kl<T: Real>(
    imputed: &MaskedMatrix<T>,
    truth: &MaskedMatrix<T>,
    eval_points: &MaskedMatrix<T>,
    method: &str,
) -> Result<KlReport, EvalError> {
    if imputed.columns() != truth.columns() || imputed.columns() != eval_points.columns() {
        return Err(EvalError::Shape("imputed, truth and evaluation sets must share columns".into()));
    }
    if eval_points.nrows() < 2 {
        return Err(EvalError::TooFewPoints { needed: 2, found: eval_points.nrows() });
    }
    if !eval_points.is_fully_observed() {
        return Err(EvalError::Incomplete("evaluation points".into()));
    }
    let g = KdeModel::fit(imputed)?;
    let f = KdeModel::fit(truth)?;
    let points: Vec<Vec<f64>> = (0..eval_points.nrows()).map(|r| eval_points.row_values(r).iter().map(|v| v.as_f64()).collect()).collect();
    let lg = g.log_density_rows(&points);
    let lf = f.log_density_rows(&points);
    let terms: Vec<f64> = lg.iter().zip(&lf).map(|(a, b)| a - b).collect();
    let value = terms.iter().sum::<f64>() / terms.len() as f64;
    Ok(KlReport {
        value,
        n_eval: terms.len(),
        terms,
        method: method.to_owned(),
        kernel: "gaussian-product/silverman".to_owned(),
        bandwidth_imputed: g.bandwidth().to_vec(),
        bandwidth_truth: f.bandwidth().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FileTag;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> MaskedMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| shift + z.sample(&mut rng)).collect()).collect();
        let cols = (0..d).map(|j| format!("x{j}")).collect();
        MaskedMatrix::from_rows(cols, &rows, FileTag::Unassigned).unwrap()
    }

    fn shifted(m: &MaskedMatrix<f64>, by: f64) -> MaskedMatrix<f64> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|r| m.row_values(r).iter().map(|v| v + by).collect()).collect();
        MaskedMatrix::from_rows(m.columns().to_vec(), &rows, FileTag::Unassigned).unwrap()
    }

    #[test]
    fn identical_inputs_give_exact_zero() {
        let s = gaussian(300, 3, 0.0, 1);
        let r = empirical_kl(&s, &s, &gaussian(50, 3, 0.0, 2), "same").unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.n_eval, 50);
    }

    #[test]
    fn shifted_cloud_is_large() {
        // KL between unit Gaussians a distance δ apart per coordinate is
        // d δ²/2; with δ = 3, d = 2 that is 9.
        let truth = gaussian(1000, 2, 0.0, 3);
        let imputed = gaussian(1000, 2, 3.0, 4);
        let eval = gaussian(400, 2, 3.0, 5);
        let r = empirical_kl(&imputed, &truth, &eval, "shift").unwrap();
        assert!(r.value > 4.5, "{}", r.value);
    }

    #[test]
    fn translation_equivariant() {
        let (a, b, e) = (gaussian(200, 2, 0.0, 6), gaussian(200, 2, 0.5, 7), gaussian(40, 2, 0.2, 8));
        let r0 = empirical_kl(&a, &b, &e, "t").unwrap();
        let r1 = empirical_kl(&shifted(&a, 17.0), &shifted(&b, 17.0), &shifted(&e, 17.0), "t").unwrap();
        assert!((r0.value - r1.value).abs() < 1e-9, "{} {}", r0.value, r1.value);
    }

    #[test]
    fn needs_two_eval_points() {
        let s = gaussian(20, 2, 0.0, 9);
        assert!(matches!(empirical_kl(&s, &s, &gaussian(1, 2, 0.0, 1), "x"), Err(EvalError::TooFewPoints { .. })));
    }
}
