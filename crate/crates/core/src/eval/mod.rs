//! Density-based comparison of imputed files against ground truth, plus
//! the repeated-split experiment protocol and the synthetic generators
//! it runs on.

mod kde;
mod kl;
pub mod synthetic;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{split_for_matching, FilePattern, FileTag, MaskedMatrix, MatchingSplit, SplitSpec};
use crate::impute::{match_files, MatchedOutput};
use crate::pipeline::{cluster_files, evaluation_points, Clustering, PipelineOptions};
use crate::scalar::Real;

pub use kde::{kde_log_density, KdeModel};
pub use kl::{empirical_kl, KlReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate KDE bandwidth: column `{0}` has zero variance")]
    DegenerateBandwidth(String),
    #[error("need at least {needed} points, found {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("{0} must be fully observed")]
    Incomplete(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Mean and standard error of repeated measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Summary {
    /// Standard error uses the `n − 1` sample deviation; zero when `n < 2`.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt() };
        Self { mean, stderr, n }
    }
}

/// KL of both files under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileKl {
    pub file1: KlReport,
    pub file2: KlReport,
}

/// One seeded split run through both methods.
#[derive(Debug, Clone)]
pub struct Replicate<T: Real> {
    pub seed: u64,
    pub split: MatchingSplit<T>,
    pub clustering: Clustering<T>,
    pub nn: MatchedOutput<T>,
    pub cluster_nn: MatchedOutput<T>,
    pub kl_nn: FileKl,
    pub kl_cluster_nn: FileKl,
}

/// Fixed inputs of the repeated-split experiment.
#[derive(Debug, Clone)]
pub struct Experiment<T: Real> {
    /// Fully observed source table.
    pub source: MaskedMatrix<T>,
    pub pattern: FilePattern,
    pub n1: usize,
    pub n2: usize,
    pub n_eval: usize,
    /// Initial component means, in source column order.
    pub means: Vec<DVector<T>>,
    pub options: PipelineOptions,
}

impl<T: Real> Experiment<T> {
    /// Splits with `seed`, clusters, imputes with both methods and scores
    /// each file against its truth.
    pub fn replicate(&self, seed: u64) -> Result<Replicate<T>, crate::Error> {
        let spec = SplitSpec { n1: self.n1, n2: self.n2, n_eval: self.n_eval, seed, pattern: self.pattern.clone() };
        let split = split_for_matching(&self.source, &spec)?;
        let common = self.pattern.resolve(self.source.columns())?.common;
        let imp = &self.options.impute;
        let (truth1, truth2) = (split.truth1(&self.source), split.truth2(&self.source));

        let nn = match_files(&split.file1, &split.file2, &common, None, imp)?;
        let eval1 = evaluation_points(&split.eval, &self.pattern, FileTag::File1, &split.file2, None, &common, imp)?;
        let eval2 = evaluation_points(&split.eval, &self.pattern, FileTag::File2, &split.file1, None, &common, imp)?;
        let kl_nn = FileKl {
            file1: empirical_kl(&nn.file1.completed, &truth1, &eval1, "nn")?,
            file2: empirical_kl(&nn.file2.completed, &truth2, &eval2, "nn")?,
        };

        let clustering = cluster_files(&split.file1, &split.file2, &self.means, &self.options)?;
        let labels = (clustering.labels1.as_slice(), clustering.labels2.as_slice());
        let cluster_nn = match_files(&split.file1, &split.file2, &common, Some(labels), imp)?;
        let m = &clustering.model;
        let eval1 = evaluation_points(&split.eval, &self.pattern, FileTag::File1, &split.file2, Some((m, labels.1)), &common, imp)?;
        let eval2 = evaluation_points(&split.eval, &self.pattern, FileTag::File2, &split.file1, Some((m, labels.0)), &common, imp)?;
        let kl_cluster_nn = FileKl {
            file1: empirical_kl(&cluster_nn.file1.completed, &truth1, &eval1, "cluster-nn")?,
            file2: empirical_kl(&cluster_nn.file2.completed, &truth2, &eval2, "cluster-nn")?,
        };
        Ok(Replicate { seed, split, clustering, nn, cluster_nn, kl_nn, kl_cluster_nn })
    }
}

/// One line of the method × file table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub method: String,
    pub file1: Summary,
    pub file2: Summary,
}

/// Per-replicate KL values and their summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlTable {
    pub seeds: Vec<u64>,
    pub nn: [Vec<f64>; 2],
    pub cluster_nn: [Vec<f64>; 2],
    pub rows: Vec<KlRow>,
}

impl KlTable {
    pub fn from_replicates<T: Real>(reps: &[Replicate<T>]) -> Self {
        let col = |f: &dyn Fn(&Replicate<T>) -> f64| reps.iter().map(f).collect::<Vec<_>>();
        let nn = [col(&|r| r.kl_nn.file1.value), col(&|r| r.kl_nn.file2.value)];
        let cluster_nn = [col(&|r| r.kl_cluster_nn.file1.value), col(&|r| r.kl_cluster_nn.file2.value)];
        let rows = vec![
            KlRow { method: "nn".into(), file1: Summary::of(&nn[0]), file2: Summary::of(&nn[1]) },
            KlRow { method: "cluster-nn".into(), file1: Summary::of(&cluster_nn[0]), file2: Summary::of(&cluster_nn[1]) },
        ];
        Self { seeds: reps.iter().map(|r| r.seed).collect(), nn, cluster_nn, rows }
    }

    /// Fixed-width text table: method × file, mean ± standard error.
    pub fn render(&self) -> String {
        let mut out = format!("{:<12} {:>22} {:>22}\n", "method", "file 1", "file 2");
        for r in &self.rows {
            let cell = |s: &Summary| format!("{:.4} ± {:.4}", s.mean, s.stderr);
            out.push_str(&format!("{:<12} {:>22} {:>22}\n", r.method, cell(&r.file1), cell(&r.file2)));
        }
        out
    }
}

/// Local maxima of a smoothed 2-D histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCount {
    /// Bin-center coordinates of each mode.
    pub modes: Vec<(f64, f64)>,
    pub bins: usize,
    /// Smoothed counts, row index along x.
    pub grid: Vec<Vec<f64>>,
}

/// Counts modes of the joint distribution of `(xs, ys)`: equal-width
/// `bins × bins` histogram over the data range, 3×3 box smoothing, then
/// cells that dominate their 8 neighbors and exceed `threshold_rel` times
/// the highest cell. On plateaus only the first cell in raster order
/// counts.
pub fn count_modes_2d(xs: &[f64], ys: &[f64], bins: usize, threshold_rel: f64) -> ModeCount {
    assert_eq!(xs.len(), ys.len());
    assert!(bins >= 3);
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let ((x0, xw), (y0, yw)) = (range(xs), range(ys));
    let cell = |v: f64, lo: f64, w: f64| (((v - lo) / w * bins as f64) as usize).min(bins - 1);
    let mut counts = vec![vec![0.0; bins]; bins];
    for (&x, &y) in xs.iter().zip(ys) {
        counts[cell(x, x0, xw)][cell(y, y0, yw)] += 1.0;
    }
    let at = |g: &Vec<Vec<f64>>, i: isize, j: isize| {
        if i < 0 || j < 0 || i >= bins as isize || j >= bins as isize {
            0.0
        } else {
            g[i as usize][j as usize]
        }
    };
    let mut grid = vec![vec![0.0; bins]; bins];
    for i in 0..bins as isize {
        for j in 0..bins as isize {
            let mut s = 0.0;
            for di in -1..=1 {
                for dj in -1..=1 {
                    s += at(&counts, i + di, j + dj);
                }
            }
            grid[i as usize][j as usize] = s / 9.0;
        }
    }
    let peak = grid.iter().flatten().copied().fold(0.0, f64::max);
    let mut modes = Vec::new();
    for i in 0..bins as isize {
        for j in 0..bins as isize {
            let v = grid[i as usize][j as usize];
            if v <= threshold_rel * peak || v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let n = at(&grid, i + di, j + dj);
                    let earlier = di < 0 || (di == 0 && dj < 0);
                    if n > v || (earlier && n == v) {
                        is_max = false;
                    }
                }
            }
            if is_max {
                let center = |k: isize, lo: f64, w: f64| lo + (k as f64 + 0.5) * w / bins as f64;
                modes.push((center(i, x0, xw), center(j, y0, yw)));
            }
        }
    }
    ModeCount { modes, bins, grid }
}
