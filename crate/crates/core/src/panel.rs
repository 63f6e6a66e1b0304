//! Domain knowledge about cell populations.
//!
//! A panel lists the expected cell types together with a `+`/`-`
//! expression sign per marker, and the measured value that `+` and `-`
//! stand for on each marker. Levels either come from configuration or are
//! read off the two dominant peaks of a marker's histogram.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::MaskedMatrix;
use crate::scalar::Real;

pub const DEFAULT_BINS: usize = 64;
pub const DEFAULT_SMOOTHING: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum PanelError {
    #[error("panel needs at least one cell type")]
    NoCellTypes,
    #[error("panel needs at least one marker")]
    NoMarkers,
    #[error("duplicate marker `{0}`")]
    DuplicateMarker(String),
    #[error("cell type `{name}` gives {got} signs for {expected} markers")]
    SignCount { name: String, got: usize, expected: usize },
    #[error("cell type `{name}`: invalid sign `{sign}` (use + or -)")]
    BadSign { name: String, sign: char },
    #[error("levels given for unknown marker `{0}`")]
    UnknownLevelMarker(String),
    #[error("marker `{marker}`: positive level {positive} must exceed negative level {negative}")]
    LevelOrder { marker: String, negative: f64, positive: f64 },
    #[error("marker `{0}` has no expression levels")]
    MissingLevel(String),
    #[error("data column `{0}` is not a panel marker")]
    UnknownColumn(String),
    #[error("panel marker `{0}` is absent from the data")]
    AbsentMarker(String),
    #[error("histogram needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("histogram needs at least 8 bins, got {0}")]
    TooFewBins(usize),
    #[error("all values are identical ({0}); histogram is degenerate")]
    DegenerateHistogram(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellType {
    pub name: String,
    /// One sign per panel marker, in marker order.
    pub signs: Vec<Sign>,
}

/// Negative and positive expression level of one marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Levels {
    pub negative: f64,
    pub positive: f64,
}

/// Cell types × marker signs plus per-marker levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPanel", into = "RawPanel")]
pub struct PanelConfig {
    markers: Vec<String>,
    cell_types: Vec<CellType>,
    levels: Vec<Option<Levels>>,
}

/// On-disk form: signs as a compact `"+-+..."` string, levels as
/// `marker = [negative, positive]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawPanel {
    markers: Vec<String>,
    cell_types: Vec<RawCellType>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    levels: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawCellType {
    name: String,
    signs: String,
}

impl TryFrom<RawPanel> for PanelConfig {
    type Error = PanelError;

    fn try_from(raw: RawPanel) -> Result<Self, PanelError> {
        let mut cell_types = Vec::with_capacity(raw.cell_types.len());
        for ct in raw.cell_types {
            let signs = ct
                .signs
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| match c {
                    '+' => Ok(Sign::Positive),
                    '-' | '−' => Ok(Sign::Negative),
                    other => Err(PanelError::BadSign { name: ct.name.clone(), sign: other }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            cell_types.push(CellType { name: ct.name, signs });
        }
        let mut levels = vec![None; raw.markers.len()];
        for (marker, [negative, positive]) in raw.levels {
            let j = raw.markers.iter().position(|m| *m == marker).ok_or_else(|| PanelError::UnknownLevelMarker(marker.clone()))?;
            levels[j] = Some(Levels { negative, positive });
        }
        PanelConfig::new(raw.markers, cell_types, levels)
    }
}

impl From<PanelConfig> for RawPanel {
    fn from(p: PanelConfig) -> Self {
        let cell_types = p
            .cell_types
            .iter()
            .map(|ct| RawCellType {
                name: ct.name.clone(),
                signs: ct
                    .signs
                    .iter()
                    .map(|s| match s {
                        Sign::Positive => '+',
                        Sign::Negative => '-',
                    })
                    .collect(),
            })
            .collect();
        let levels = p.markers.iter().zip(&p.levels).filter_map(|(m, l)| l.map(|l| (m.clone(), [l.negative, l.positive]))).collect();
        RawPanel { markers: p.markers, cell_types, levels }
    }
}

impl PanelConfig {
    pub fn new(markers: Vec<String>, cell_types: Vec<CellType>, levels: Vec<Option<Levels>>) -> Result<Self, PanelError> {
        if markers.is_empty() {
            return Err(PanelError::NoMarkers);
        }
        if cell_types.is_empty() {
            return Err(PanelError::NoCellTypes);
        }
        for (i, m) in markers.iter().enumerate() {
            if markers[..i].contains(m) {
                return Err(PanelError::DuplicateMarker(m.clone()));
            }
        }
        for ct in &cell_types {
            if ct.signs.len() != markers.len() {
                return Err(PanelError::SignCount { name: ct.name.clone(), got: ct.signs.len(), expected: markers.len() });
            }
        }
        if levels.len() != markers.len() {
            return Err(PanelError::SignCount { name: "<levels>".into(), got: levels.len(), expected: markers.len() });
        }
        for (m, l) in markers.iter().zip(&levels) {
            if let Some(l) = l {
                check_order(m, *l)?;
            }
        }
        Ok(Self { markers, cell_types, levels })
    }

    /// Six white-blood-cell types over FS, SS, CD56, CD16, CD3, CD8, CD4
    /// with hand-picked lymph-node expression levels.
    pub fn lymph_node() -> Self {
        let markers: Vec<String> = ["FS", "SS", "CD56", "CD16", "CD3", "CD8", "CD4"].map(String::from).to_vec();
        let types = [
            ("granulocyte", "++-+---"),
            ("monocyte", "+--+---"),
            ("helper T cell", "----+-+"),
            ("cytotoxic T cell", "----++-"),
            ("B lymphocyte", "-------"),
            ("natural killer cell", "--++---"),
        ];
        let cell_types = types
            .iter()
            .map(|(name, signs)| CellType {
                name: name.to_string(),
                signs: signs.chars().map(|c| if c == '+' { Sign::Positive } else { Sign::Negative }).collect(),
            })
            .collect();
        let levels = [(400., 800.), (400., 680.), (240., 500.), (130., 350.), (200., 550.), (170., 750.), (200., 650.)]
            .iter()
            .map(|&(negative, positive)| Some(Levels { negative, positive }))
            .collect();
        Self::new(markers, cell_types, levels).expect("built-in panel is valid")
    }

    pub fn markers(&self) -> &[String] {
        &self.markers
    }

    pub fn cell_types(&self) -> &[CellType] {
        &self.cell_types
    }

    pub fn n_types(&self) -> usize {
        self.cell_types.len()
    }

    pub fn levels(&self) -> &[Option<Levels>] {
        &self.levels
    }

    pub fn set_levels(&mut self, marker: &str, levels: Levels) -> Result<(), PanelError> {
        check_order(marker, levels)?;
        let j = self.markers.iter().position(|m| m == marker).ok_or_else(|| PanelError::UnknownLevelMarker(marker.to_string()))?;
        self.levels[j] = Some(levels);
        Ok(())
    }

    /// Copy with marker order `order` (indices into the current markers).
    pub fn permute_markers(&self, order: &[usize]) -> Result<Self, PanelError> {
        let markers = order.iter().map(|&j| self.markers[j].clone()).collect();
        let cell_types = self
            .cell_types
            .iter()
            .map(|ct| CellType { name: ct.name.clone(), signs: order.iter().map(|&j| ct.signs[j]).collect() })
            .collect();
        let levels = order.iter().map(|&j| self.levels[j]).collect();
        Self::new(markers, cell_types, levels)
    }
}

fn check_order(marker: &str, l: Levels) -> Result<(), PanelError> {
    if !(l.positive > l.negative) {
        return Err(PanelError::LevelOrder { marker: marker.to_string(), negative: l.negative, positive: l.positive });
    }
    Ok(())
}

/// One mean vector per cell type, coordinates in panel marker order.
pub fn initial_means<T: Real>(panel: &PanelConfig) -> Result<Vec<DVector<T>>, PanelError> {
    initial_means_for(panel, panel.markers())
}

/// As [`initial_means`], with coordinates laid out in `columns` order.
/// `columns` must be a permutation of the panel markers.
pub fn initial_means_for<T: Real>(panel: &PanelConfig, columns: &[String]) -> Result<Vec<DVector<T>>, PanelError> {
    let mut index = Vec::with_capacity(columns.len());
    for c in columns {
        let j = panel.markers.iter().position(|m| m == c).ok_or_else(|| PanelError::UnknownColumn(c.clone()))?;
        index.push(j);
    }
    if let Some(m) = panel.markers.iter().find(|m| !columns.contains(m)) {
        return Err(PanelError::AbsentMarker(m.clone()));
    }
    let mut levels = Vec::with_capacity(index.len());
    for &j in &index {
        levels.push(panel.levels[j].ok_or_else(|| PanelError::MissingLevel(panel.markers[j].clone()))?);
    }
    Ok(panel
        .cell_types
        .iter()
        .map(|ct| {
            DVector::from_iterator(
                index.len(),
                index.iter().zip(&levels).map(|(&j, l)| {
                    T::lit(match ct.signs[j] {
                        Sign::Positive => l.positive,
                        Sign::Negative => l.negative,
                    })
                }),
            )
        })
        .collect())
}

/// A local maximum of the smoothed histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub location: f64,
    pub height: f64,
    pub prominence: f64,
}

/// Histogram and peak audit trail for one marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub marker: String,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub smoothed: Vec<f64>,
    pub peaks: Vec<Peak>,
    pub levels: Levels,
    /// Only one local maximum was found; both levels sit on it.
    pub single_peak: bool,
}

/// Result of [`detect_levels`].
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDetection {
    pub negative: f64,
    pub positive: f64,
    pub single_peak: bool,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub smoothed: Vec<f64>,
    pub peaks: Vec<Peak>,
}

impl LevelDetection {
    pub fn into_report(self, marker: &str) -> PeakReport {
        PeakReport {
            marker: marker.to_string(),
            levels: Levels { negative: self.negative, positive: self.positive },
            single_peak: self.single_peak,
            edges: self.edges,
            counts: self.counts,
            smoothed: self.smoothed,
            peaks: self.peaks,
        }
    }
}

/// Picks negative/positive expression levels from a marker's histogram.
///
/// Counts in `bins` equal-width bins are smoothed with a centered moving
/// average of `smoothing` bins (truncated at the edges). Of the local
/// maxima, the two with the largest prominence are kept and returned in
/// increasing order of location.
pub fn detect_levels<T: Real>(values: &[T], bins: usize, smoothing: usize) -> Result<LevelDetection, PanelError> {
    if values.len() < 2 {
        return Err(PanelError::TooFewValues(values.len()));
    }
    if bins < 8 {
        return Err(PanelError::TooFewBins(bins));
    }
    let xs: Vec<f64> = values.iter().map(|v| v.as_f64()).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(PanelError::DegenerateHistogram(lo));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for &x in &xs {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let smoothed = moving_average(&counts, smoothing.max(1));
    let centers: Vec<f64> = (0..bins).map(|i| lo + width * (i as f64 + 0.5)).collect();
    let peaks = find_peaks(&smoothed, &centers);

    let mut ranked: Vec<&Peak> = peaks.iter().collect();
    // Most prominent first; equal prominence prefers the lower location.
    ranked.sort_by(|a, b| b.prominence.partial_cmp(&a.prominence).unwrap().then(a.location.partial_cmp(&b.location).unwrap()));
    let (negative, positive, single_peak) = match ranked.as_slice() {
        [only] => (only.location, only.location, true),
        [a, b, ..] => (a.location.min(b.location), a.location.max(b.location), false),
        [] => unreachable!("a non-constant smoothed histogram has a maximum"),
    };
    Ok(LevelDetection { negative, positive, single_peak, edges, counts, smoothed, peaks })
}

fn moving_average(counts: &[u64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = counts.len();
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + window - half).min(n);
            counts[a..b].iter().sum::<u64>() as f64 / (b - a) as f64
        })
        .collect()
}

/// Local maxima (plateaus count once, located at their middle bin) with
/// topographic prominence: height minus the higher of the lowest points
/// reached on each side before meeting a strictly higher bin or the edge.
fn find_peaks(s: &[f64], centers: &[f64]) -> Vec<Peak> {
    let n = s.len();
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && s[j + 1] == s[i] {
            j += 1;
        }
        let left_lower = i == 0 || s[i - 1] < s[i];
        let right_lower = j + 1 == n || s[j + 1] < s[i];
        if left_lower && right_lower && s[i] > 0.0 {
            let h = s[i];
            let mut left_min = h;
            for k in (0..i).rev() {
                if s[k] > h {
                    break;
                }
                left_min = left_min.min(s[k]);
            }
            let mut right_min = h;
            for &v in &s[j + 1..] {
                if v > h {
                    break;
                }
                right_min = right_min.min(v);
            }
            let mid = (i + j) / 2;
            let location = if (j - i) % 2 == 0 { centers[mid] } else { 0.5 * (centers[mid] + centers[mid + 1]) };
            peaks.push(Peak { location, height: h, prominence: h - left_min.max(right_min) });
        }
        i = j + 1;
    }
    peaks
}

/// Fills every level the panel leaves open from the matching data column.
/// Configured levels are kept as they are. Returns the reports of the
/// markers that were detected.
pub fn fill_levels<T: Real>(
    panel: &PanelConfig,
    data: &MaskedMatrix<T>,
    bins: usize,
    smoothing: usize,
) -> Result<(PanelConfig, Vec<PeakReport>), PanelError> {
    let mut out = panel.clone();
    let mut reports = Vec::new();
    for (j, marker) in panel.markers.iter().enumerate() {
        if panel.levels[j].is_some() {
            continue;
        }
        let col = data.column_index(marker).ok_or_else(|| PanelError::AbsentMarker(marker.clone()))?;
        let det = detect_levels(&data.observed_column(col), bins, smoothing)?;
        if det.single_peak {
            log::warn!("marker {marker}: only one histogram peak found at {}", det.negative);
            return Err(PanelError::LevelOrder { marker: marker.clone(), negative: det.negative, positive: det.positive });
        }
        out.levels[j] = Some(Levels { negative: det.negative, positive: det.positive });
        reports.push(det.into_report(marker));
    }
    Ok((out, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn bimodal(seed: u64, n_each: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(200.0, 20.0).unwrap();
        let b = Normal::new(550.0, 20.0).unwrap();
        let mut v: Vec<f64> = (0..n_each).map(|_| a.sample(&mut rng)).collect();
        v.extend((0..n_each).map(|_| b.sample(&mut rng)));
        v
    }

    #[test]
    fn helper_t_mean_uses_panel_levels() {
        let means = initial_means::<f64>(&PanelConfig::lymph_node()).unwrap();
        assert_eq!(means.len(), 6);
        assert_eq!(means[2].as_slice(), &[400.0, 400.0, 240.0, 130.0, 550.0, 170.0, 650.0]);
    }

    #[test]
    fn all_negative_type_gets_negative_levels() {
        let panel = PanelConfig::new(
            vec!["a".into(), "b".into()],
            vec![CellType { name: "x".into(), signs: vec![Sign::Negative; 2] }],
            vec![Some(Levels { negative: 1.0, positive: 5.0 }), Some(Levels { negative: -2.0, positive: 0.0 })],
        )
        .unwrap();
        assert_eq!(initial_means::<f64>(&panel).unwrap()[0].as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn types_differing_in_one_marker_differ_in_one_coordinate() {
        let means = initial_means::<f64>(&PanelConfig::lymph_node()).unwrap();
        // helper vs cytotoxic T differ in CD8 and CD4; B vs NK in CD56 and CD16.
        let diff: Vec<usize> = (0..7).filter(|&j| means[2][j] != means[3][j]).collect();
        assert_eq!(diff, vec![5, 6]);
        let one = PanelConfig::new(
            vec!["a".into(), "b".into()],
            vec![
                CellType { name: "x".into(), signs: vec![Sign::Negative, Sign::Positive] },
                CellType { name: "y".into(), signs: vec![Sign::Positive, Sign::Positive] },
            ],
            vec![Some(Levels { negative: 0.0, positive: 1.0 }); 2],
        )
        .unwrap();
        let m = initial_means::<f64>(&one).unwrap();
        assert_eq!((m[0][0] != m[1][0], m[0][1] != m[1][1]), (true, false));
    }

    #[test]
    fn permuting_columns_permutes_means() {
        let panel = PanelConfig::lymph_node();
        let order = [6, 0, 3, 1, 5, 2, 4];
        let base = initial_means::<f64>(&panel).unwrap();
        let permuted = initial_means::<f64>(&panel.permute_markers(&order).unwrap()).unwrap();
        let cols: Vec<String> = order.iter().map(|&j| panel.markers()[j].clone()).collect();
        let by_columns = initial_means_for::<f64>(&panel, &cols).unwrap();
        for k in 0..6 {
            for (i, &j) in order.iter().enumerate() {
                assert_eq!(permuted[k][i], base[k][j]);
                assert_eq!(by_columns[k][i], base[k][j]);
            }
        }
    }

    #[test]
    fn missing_level_is_config_error() {
        let mut panel = PanelConfig::lymph_node();
        panel.levels[4] = None;
        assert_eq!(initial_means::<f64>(&panel).unwrap_err(), PanelError::MissingLevel("CD3".into()));
    }

    #[test]
    fn config_round_trip_and_validation() {
        let text = r#"
markers = ["a", "b"]
levels = { a = [1.0, 2.0] }
[[cell_types]]
name = "x"
signs = "+-"
"#;
        let p: PanelConfig = toml::from_str(text).unwrap();
        assert_eq!(p.cell_types()[0].signs, vec![Sign::Positive, Sign::Negative]);
        assert_eq!(p.levels()[1], None);
        let back: PanelConfig = toml::from_str(&toml::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);

        let short = text.replace("\"+-\"", "\"+\"");
        assert!(toml::from_str::<PanelConfig>(&short).is_err());
        let reversed = text.replace("[1.0, 2.0]", "[2.0, 1.0]");
        assert!(toml::from_str::<PanelConfig>(&reversed).is_err());
    }

    /// Mode locations of the generating mixture located by brute force on a
    /// fine histogram; `detect_levels` must land within ±15 of them.
    #[test]
    fn bimodal_levels_match_fine_histogram_modes() {
        let v = bimodal(11, 500);
        // Argmax of the generating mixture density on a fine grid.
        let fine_mode = |lo: f64, hi: f64| {
            let dens = |x: f64| (-(x - 200.0f64).powi(2) / 800.0).exp() + (-(x - 550.0f64).powi(2) / 800.0).exp();
            let w = (hi - lo) / 20_000.0;
            (0..20_000).map(|i| lo + w * (i as f64 + 0.5)).max_by(|a, b| dens(*a).partial_cmp(&dens(*b)).unwrap()).unwrap()
        };
        let (m1, m2) = (fine_mode(100.0, 375.0), fine_mode(375.0, 650.0));
        assert!((m1 - 200.0).abs() < 0.5 && (m2 - 550.0).abs() < 0.5);

        let det = detect_levels(&v, DEFAULT_BINS, DEFAULT_SMOOTHING).unwrap();
        assert!(!det.single_peak);
        assert!((det.negative - m1).abs() <= 15.0, "negative {}", det.negative);
        assert!((det.positive - m2).abs() <= 15.0, "positive {}", det.positive);
    }

    #[test]
    fn unimodal_sample_flags_single_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(400.0, 30.0).unwrap();
        let v: Vec<f64> = (0..5000).map(|_| n.sample(&mut rng)).collect();
        let det = detect_levels(&v, 32, 5).unwrap();
        if det.single_peak {
            assert!((det.negative - 400.0).abs() < 20.0);
            assert_eq!(det.negative, det.positive);
        } else {
            // a noise bump may survive smoothing; the dominant peak is still at the mode
            let top = det.peaks.iter().max_by(|a, b| a.prominence.partial_cmp(&b.prominence).unwrap()).unwrap();
            assert!((top.location - 400.0).abs() < 20.0);
        }
        // integers 0..=8 land in distinct bins; counts form a triangle
        let clean: Vec<f64> = (0..=8).flat_map(|k: i32| std::iter::repeat_n(k as f64, (5 - (k - 4).abs()) as usize)).collect();
        let det = detect_levels(&clean, 9, 1).unwrap();
        assert!(det.single_peak);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(detect_levels(&[3.0, 3.0, 3.0], 64, 3).unwrap_err(), PanelError::DegenerateHistogram(3.0));
        assert_eq!(detect_levels(&[3.0], 64, 3).unwrap_err(), PanelError::TooFewValues(1));
        assert_eq!(detect_levels(&[1.0, 3.0], 4, 3).unwrap_err(), PanelError::TooFewBins(4));
    }

    #[test]
    fn invariant_to_order_and_proportional_duplication() {
        let v = bimodal(3, 300);
        let base = detect_levels(&v, DEFAULT_BINS, DEFAULT_SMOOTHING).unwrap();
        let mut rev = v.clone();
        rev.reverse();
        let mut doubled = v.clone();
        doubled.extend_from_slice(&v);
        for other in [rev, doubled] {
            let d = detect_levels(&other, DEFAULT_BINS, DEFAULT_SMOOTHING).unwrap();
            assert_eq!((d.negative, d.positive), (base.negative, base.positive));
        }
    }

    #[test]
    fn prominence_is_height_above_higher_saddle() {
        let s = [0.0, 5.0, 1.0, 3.0, 0.0];
        let c = [0.0, 1.0, 2.0, 3.0, 4.0];
        let p = find_peaks(&s, &c);
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].prominence, 5.0);
        assert_eq!(p[1].prominence, 2.0);
    }
}
