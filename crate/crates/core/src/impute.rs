//! Hot-deck nearest-neighbor imputation between two files.
//!
//! Every recipient row copies the cells it lacks from the donor row
//! closest on the common columns. The cluster variant restricts the donor
//! pool to rows sharing the recipient's label. Imputed values are always
//! verbatim donor values.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::MaskedMatrix;
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum ImputeError {
    #[error("donor file is empty")]
    EmptyDonors,
    #[error("common column `{column}` is missing in {role} row {row}")]
    CommonMissing { role: &'static str, row: usize, column: String },
    #[error("donor row {donor} does not observe column `{column}` needed by recipient row {recipient}")]
    DonorMissing { recipient: usize, donor: usize, column: String },
    #[error("recipient and donor files have different columns")]
    Columns,
    #[error("the common column set is empty")]
    NoCommon,
    #[error("{0} labels for {1} rows")]
    Labels(usize, usize),
    #[error("cannot standardize: common column `{0}` has zero spread among donors")]
    ZeroSpread(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Nn,
    ClusterNn,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Nn => "nn",
            Method::ClusterNn => "cluster-nn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeOptions {
    /// Divide common coordinates by the donor standard deviation before
    /// measuring distance.
    pub standardize: bool,
    /// Use a k-d tree when there are at most [`INDEX_MAX_DIM`] common
    /// columns. Results are identical to brute force.
    pub spatial_index: bool,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        Self { standardize: false, spatial_index: true }
    }
}

/// Largest common-set size for which the k-d tree is used.
pub const INDEX_MAX_DIM: usize = 3;

/// One completed file with per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedFile<T: Real> {
    pub completed: MaskedMatrix<T>,
    /// Donor row per recipient; `None` when the row was already complete.
    pub donor: Vec<Option<usize>>,
    /// Zero-based cluster label per recipient (cluster method only).
    pub label: Option<Vec<usize>>,
    /// Rows whose cluster had no donors and fell back to the full pool.
    pub fallback: Vec<bool>,
}

impl<T: Real> ImputedFile<T> {
    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }
}

/// Both files of a match, each completed from the other.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedOutput<T: Real> {
    pub file1: ImputedFile<T>,
    pub file2: ImputedFile<T>,
    pub method: Method,
}

/// Plain nearest-neighbor imputation: donor = argmin over all donors of
/// `‖x_r^c − x_d^c‖₂`, lowest donor index on ties.
pub fn nn_impute<T: Real>(
    recipients: &MaskedMatrix<T>,
    donors: &MaskedMatrix<T>,
    common: &[usize],
    opts: &ImputeOptions,
) -> Result<ImputedFile<T>, ImputeError> {
    let labels_r = vec![0; recipients.nrows()];
    let labels_d = vec![0; donors.nrows()];
    let mut out = impute_grouped(recipients, donors, &labels_r, &labels_d, common, opts)?;
    out.label = None;
    Ok(out)
}

/// Nearest-neighbor imputation within clusters. A recipient whose label no
/// donor carries searches the whole donor file instead and is flagged.
pub fn cluster_nn_impute<T: Real>(
    recipients: &MaskedMatrix<T>,
    donors: &MaskedMatrix<T>,
    labels_r: &[usize],
    labels_d: &[usize],
    common: &[usize],
    opts: &ImputeOptions,
) -> Result<ImputedFile<T>, ImputeError> {
    impute_grouped(recipients, donors, labels_r, labels_d, common, opts)
}

/// Completes file 1 from file 2 and file 2 from file 1. With `labels`,
/// the search is cluster-restricted.
pub fn match_files<T: Real>(
    file1: &MaskedMatrix<T>,
    file2: &MaskedMatrix<T>,
    common: &[usize],
    labels: Option<(&[usize], &[usize])>,
    opts: &ImputeOptions,
) -> Result<MatchedOutput<T>, ImputeError> {
    Ok(match labels {
        None => MatchedOutput {
            file1: nn_impute(file1, file2, common, opts)?,
            file2: nn_impute(file2, file1, common, opts)?,
            method: Method::Nn,
        },
        Some((l1, l2)) => MatchedOutput {
            file1: cluster_nn_impute(file1, file2, l1, l2, common, opts)?,
            file2: cluster_nn_impute(file2, file1, l2, l1, common, opts)?,
            method: Method::ClusterNn,
        },
    })
}

fn impute_grouped<T: Real>(
    recipients: &MaskedMatrix<T>,
    donors: &MaskedMatrix<T>,
    labels_r: &[usize],
    labels_d: &[usize],
    common: &[usize],
    opts: &ImputeOptions,
) -> Result<ImputedFile<T>, ImputeError> {
    if recipients.columns() != donors.columns() {
        return Err(ImputeError::Columns);
    }
    if common.is_empty() {
        return Err(ImputeError::NoCommon);
    }
    if labels_r.len() != recipients.nrows() {
        return Err(ImputeError::Labels(labels_r.len(), recipients.nrows()));
    }
    if labels_d.len() != donors.nrows() {
        return Err(ImputeError::Labels(labels_d.len(), donors.nrows()));
    }
    let points_d = common_points(donors, common, "donor")?;
    let points_r = common_points(recipients, common, "recipient")?;
    let scale = if opts.standardize { donor_scale(&points_d, common.len(), donors, common)? } else { vec![1.0; common.len()] };
    let points_d: Vec<Vec<f64>> = points_d.iter().map(|p| scaled(p, &scale)).collect();

    let n_groups = labels_d.iter().chain(labels_r).max().map_or(1, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &l) in labels_d.iter().enumerate() {
        groups[l].push(i);
    }
    let all: Vec<usize> = (0..donors.nrows()).collect();
    let use_index = opts.spatial_index && common.len() <= INDEX_MAX_DIM;
    let searchers: Vec<Searcher> = groups.iter().map(|g| Searcher::new(&points_d, g.clone(), use_index)).collect();
    let global = Searcher::new(&points_d, all, use_index);

    let found: Vec<(Option<usize>, bool)> = (0..recipients.nrows())
        .into_par_iter()
        .map(|r| {
            if recipients.row_mask(r).iter().all(|&o| o) {
                return (None, false);
            }
            let q = scaled(&points_r[r], &scale);
            match searchers[labels_r[r]].nearest(&points_d, &q) {
                Some(d) => (Some(d), false),
                None => (global.nearest(&points_d, &q), true),
            }
        })
        .collect();

    let mut completed = recipients.clone();
    let mut donor = Vec::with_capacity(found.len());
    let mut fallback = Vec::with_capacity(found.len());
    for (r, (d, fb)) in found.into_iter().enumerate() {
        if let Some(d) = d {
            for j in 0..recipients.ncols() {
                if recipients.is_observed(r, j) {
                    continue;
                }
                let v = donors.get(d, j).ok_or_else(|| ImputeError::DonorMissing {
                    recipient: r,
                    donor: d,
                    column: recipients.columns()[j].clone(),
                })?;
                completed.set_observed(r, j, v);
            }
        }
        donor.push(d);
        fallback.push(fb);
    }
    Ok(ImputedFile { completed, donor, label: Some(labels_r.to_vec()), fallback })
}

fn common_points<T: Real>(m: &MaskedMatrix<T>, common: &[usize], role: &'static str) -> Result<Vec<Vec<f64>>, ImputeError> {
    (0..m.nrows())
        .map(|r| {
            common
                .iter()
                .map(|&j| {
                    m.get(r, j).map(Real::as_f64).ok_or_else(|| ImputeError::CommonMissing { role, row: r, column: m.columns()[j].clone() })
                })
                .collect()
        })
        .collect()
}

fn donor_scale<T: Real>(points: &[Vec<f64>], c: usize, donors: &MaskedMatrix<T>, common: &[usize]) -> Result<Vec<f64>, ImputeError> {
    if points.is_empty() {
        return Err(ImputeError::EmptyDonors);
    }
    let n = points.len() as f64;
    (0..c)
        .map(|j| {
            let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                Ok(1.0 / var.sqrt())
            } else {
                Err(ImputeError::ZeroSpread(donors.columns()[common[j]].clone()))
            }
        })
        .collect()
}

fn scaled(p: &[f64], scale: &[f64]) -> Vec<f64> {
    p.iter().zip(scale).map(|(v, s)| v * s).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
}

/// `(distance², index)` ordering: nearer first, then lower index.
fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Less) => true,
        Some(Ordering::Equal) => a.1 < b.1,
        _ => false,
    }
}

enum Searcher {
    Brute(Vec<usize>),
    Tree(KdTree),
}

impl Searcher {
    fn new(points: &[Vec<f64>], members: Vec<usize>, use_index: bool) -> Self {
        if use_index && !members.is_empty() {
            Searcher::Tree(KdTree::build(points, members))
        } else {
            Searcher::Brute(members)
        }
    }

    fn nearest(&self, points: &[Vec<f64>], q: &[f64]) -> Option<usize> {
        match self {
            Searcher::Brute(members) => brute_nearest(points, members, q),
            Searcher::Tree(tree) => tree.nearest(points, q),
        }
    }
}

fn brute_nearest(points: &[Vec<f64>], members: &[usize], q: &[f64]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for &i in members {
        let cand = (sq_dist(&points[i], q), i);
        if best.is_none_or(|b| better(cand, b)) {
            best = Some(cand);
        }
    }
    best.map(|b| b.1)
}

/// Exact k-d tree over a subset of points. Subtrees are skipped only when
/// their slab is strictly farther than the current best, so ties resolve
/// exactly as in brute force.
struct KdTree {
    nodes: Vec<KdNode>,
    root: usize,
}

struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    fn build(points: &[Vec<f64>], mut members: Vec<usize>) -> Self {
        let mut nodes = Vec::with_capacity(members.len());
        let dim = points[members[0]].len();
        let root = Self::build_rec(points, &mut members[..], 0, dim, &mut nodes).expect("non-empty");
        Self { nodes, root }
    }

    fn build_rec(points: &[Vec<f64>], members: &mut [usize], depth: usize, dim: usize, nodes: &mut Vec<KdNode>) -> Option<usize> {
        if members.is_empty() {
            return None;
        }
        let axis = depth % dim;
        members.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let mid = members.len() / 2;
        let point = members[mid];
        let (lo, rest) = members.split_at_mut(mid);
        let left = Self::build_rec(points, lo, depth + 1, dim, nodes);
        let right = Self::build_rec(points, &mut rest[1..], depth + 1, dim, nodes);
        nodes.push(KdNode { point, axis, left, right });
        Some(nodes.len() - 1)
    }

    fn nearest(&self, points: &[Vec<f64>], q: &[f64]) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        self.search(self.root, points, q, &mut best);
        best.map(|b| b.1)
    }

    fn search(&self, node: usize, points: &[Vec<f64>], q: &[f64], best: &mut Option<(f64, usize)>) {
        let n = &self.nodes[node];
        let p = &points[n.point];
        let cand = (sq_dist(p, q), n.point);
        if best.is_none_or(|b| better(cand, b)) {
            *best = Some(cand);
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, points, q, best);
        }
        if let Some(c) = far {
            if best.is_none_or(|b| diff * diff <= b.0) {
                self.search(c, points, q, best);
            }
        }
    }
}
