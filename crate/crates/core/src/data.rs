//! Tabular data with block-wise missingness.
//!
//! A [`MaskedMatrix`] is the unified view of every file taking part in a
//! match: rows from both files share one column space, and a per-cell mask
//! records which values were actually measured. Masked cells hold zero and
//! are never handed out by the accessors that respect the mask.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("table has no data rows")]
    Empty,
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("empty column name at position {0}")]
    EmptyColumnName(usize),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("invalid file pattern: {0}")]
    Pattern(String),
    #[error("split needs {needed} rows but the table has {available}")]
    SplitSize { needed: usize, available: usize },
    #[error("split counts must all be at least 1")]
    SplitCount,
    #[error("splitting requires fully observed input; row {row} column `{column}` is missing")]
    NotFullyObserved { row: usize, column: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot write table: {0}")]
    Write(String),
}

/// Which file a row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileTag {
    File1,
    File2,
    Eval,
    Unassigned,
}

/// N rows × d named columns with an observed/missing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMatrix<T> {
    columns: Vec<String>,
    values: Vec<T>,
    mask: Vec<bool>,
    tags: Vec<FileTag>,
    nrows: usize,
}

impl<T: Real> MaskedMatrix<T> {
    /// Builds a matrix from row-major values and mask. Masked values are
    /// zeroed on the way in.
    pub fn new(columns: Vec<String>, mut values: Vec<T>, mask: Vec<bool>, tags: Vec<FileTag>) -> Result<Self, DataError> {
        validate_columns(&columns)?;
        let d = columns.len();
        if values.len() != mask.len() {
            return Err(DataError::Shape(format!("{} values but {} mask cells", values.len(), mask.len())));
        }
        if !values.len().is_multiple_of(d) {
            return Err(DataError::Shape(format!("{} values do not fill rows of width {d}", values.len())));
        }
        let nrows = values.len() / d;
        if nrows == 0 {
            return Err(DataError::Empty);
        }
        if tags.len() != nrows {
            return Err(DataError::Shape(format!("{} tags for {nrows} rows", tags.len())));
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if !m {
                *v = T::zero();
            }
        }
        Ok(Self { columns, values, mask, tags, nrows })
    }

    /// Fully observed matrix from row vectors, every row tagged `tag`.
    pub fn from_rows(columns: Vec<String>, rows: &[Vec<T>], tag: FileTag) -> Result<Self, DataError> {
        let d = columns.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(DataError::Shape(format!("row {bad} has {} cells, expected {d}", rows[bad].len())));
        }
        let values: Vec<T> = rows.iter().flatten().copied().collect();
        let mask = vec![true; values.len()];
        Self::new(columns, values, mask, vec![tag; rows.len()])
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Resolves names to indices, failing on the first unknown one.
    pub fn column_indices<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>, DataError> {
        names.iter().map(|n| self.column_index(n.as_ref()).ok_or_else(|| DataError::UnknownColumn(n.as_ref().to_string()))).collect()
    }

    pub fn tags(&self) -> &[FileTag] {
        &self.tags
    }

    pub fn tag(&self, row: usize) -> FileTag {
        self.tags[row]
    }

    /// The observed value at `(row, col)`, or `None` when masked.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<T> {
        let i = row * self.ncols() + col;
        if self.mask[i] {
            Some(self.values[i])
        } else {
            None
        }
    }

    #[inline]
    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.ncols() + col]
    }

    /// Raw row storage; masked cells read as zero.
    #[inline]
    pub fn row_values(&self, row: usize) -> &[T] {
        let d = self.ncols();
        &self.values[row * d..(row + 1) * d]
    }

    #[inline]
    pub fn row_mask(&self, row: usize) -> &[bool] {
        let d = self.ncols();
        &self.mask[row * d..(row + 1) * d]
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Observed values of one column, in row order.
    pub fn observed_column(&self, col: usize) -> Vec<T> {
        (0..self.nrows).filter_map(|r| self.get(r, col)).collect()
    }

    /// New matrix holding `rows` (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let d = self.ncols();
        let mut values = Vec::with_capacity(rows.len() * d);
        let mut mask = Vec::with_capacity(rows.len() * d);
        let mut tags = Vec::with_capacity(rows.len());
        for &r in rows {
            values.extend_from_slice(self.row_values(r));
            mask.extend_from_slice(self.row_mask(r));
            tags.push(self.tags[r]);
        }
        Self { columns: self.columns.clone(), values, mask, tags, nrows: rows.len() }
    }

    /// New matrix with columns reordered as `order` (indices into the
    /// current columns).
    pub fn select_columns(&self, order: &[usize]) -> Result<Self, DataError> {
        let columns: Vec<String> = order.iter().map(|&j| self.columns[j].clone()).collect();
        validate_columns(&columns)?;
        let mut values = Vec::with_capacity(self.nrows * order.len());
        let mut mask = Vec::with_capacity(self.nrows * order.len());
        for r in 0..self.nrows {
            let (v, m) = (self.row_values(r), self.row_mask(r));
            for &j in order {
                values.push(v[j]);
                mask.push(m[j]);
            }
        }
        Ok(Self { columns, values, mask, tags: self.tags.clone(), nrows: self.nrows })
    }

    /// Rows of `self` followed by rows of `other`; columns must agree.
    pub fn stack(&self, other: &Self) -> Result<Self, DataError> {
        if self.columns != other.columns {
            return Err(DataError::Shape("stacked tables must share columns".into()));
        }
        let mut out = self.clone();
        out.values.extend_from_slice(&other.values);
        out.mask.extend_from_slice(&other.mask);
        out.tags.extend_from_slice(&other.tags);
        out.nrows += other.nrows;
        Ok(out)
    }

    /// Copy with every row re-tagged.
    pub fn with_tag(&self, tag: FileTag) -> Self {
        let mut out = self.clone();
        out.tags.iter_mut().for_each(|t| *t = tag);
        out
    }

    /// Copy with the given cell set to an observed value.
    pub(crate) fn set_observed(&mut self, row: usize, col: usize, value: T) {
        let i = row * self.ncols() + col;
        self.values[i] = value;
        self.mask[i] = true;
    }

    fn hide(&mut self, row: usize, col: usize) {
        let i = row * self.ncols() + col;
        self.values[i] = T::zero();
        self.mask[i] = false;
    }

    /// Row `r` as an owned vector of `f64`, `None` where masked.
    pub fn row_f64(&self, r: usize) -> Vec<Option<f64>> {
        (0..self.ncols()).map(|j| self.get(r, j).map(Real::as_f64)).collect()
    }
}

fn validate_columns(columns: &[String]) -> Result<(), DataError> {
    if columns.is_empty() {
        return Err(DataError::Shape("at least one column is required".into()));
    }
    let mut seen = BTreeSet::new();
    for (i, c) in columns.iter().enumerate() {
        if c.trim().is_empty() {
            return Err(DataError::EmptyColumnName(i));
        }
        if !seen.insert(c.as_str()) {
            return Err(DataError::DuplicateColumn(c.clone()));
        }
    }
    Ok(())
}

/// Reads a comma-separated table with a header row.
///
/// Cells equal to `missing_token` (after trimming) are missing; the empty
/// cell is always missing as well. Every row is tagged `Unassigned`.
pub fn read_table<T: Real, R: Read>(reader: R, missing_token: &str) -> Result<MaskedMatrix<T>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| DataError::Parse { line: 1, message: e.to_string() })?.clone();
    let columns: Vec<String> = header.iter().map(str::to_string).collect();
    validate_columns(&columns)?;
    let d = columns.len();

    let mut values = Vec::new();
    let mut mask = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Parse { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d {
            return Err(DataError::Parse { line, message: format!("expected {d} fields, found {}", record.len()) });
        }
        for (j, cell) in record.iter().enumerate() {
            if cell.is_empty() || cell == missing_token {
                values.push(T::zero());
                mask.push(false);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| DataError::Parse { line, message: format!("column `{}`: `{cell}` is not a number", columns[j]) })?;
                if !v.is_finite() {
                    return Err(DataError::Parse { line, message: format!("column `{}`: non-finite value", columns[j]) });
                }
                values.push(T::lit(v));
                mask.push(true);
            }
        }
    }
    let nrows = values.len() / d;
    if nrows == 0 {
        return Err(DataError::Empty);
    }
    MaskedMatrix::new(columns, values, mask, vec![FileTag::Unassigned; nrows])
}

/// Loads a table from disk; see [`read_table`].
pub fn load_table<T: Real>(path: &Path, missing_token: &str) -> Result<MaskedMatrix<T>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    read_table(std::io::BufReader::new(file), missing_token)
}

/// Writes `m` as CSV. Missing cells are empty. With `precision = None`
/// values use the shortest representation that parses back exactly.
pub fn write_table_to<T: Real, W: Write>(m: &MaskedMatrix<T>, writer: W, precision: Option<usize>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(m.columns()).map_err(|e| DataError::Write(e.to_string()))?;
    let mut record = Vec::with_capacity(m.ncols());
    for r in 0..m.nrows() {
        record.clear();
        for j in 0..m.ncols() {
            record.push(match m.get(r, j) {
                None => String::new(),
                Some(v) => format_value(v.as_f64(), precision),
            });
        }
        w.write_record(&record).map_err(|e| DataError::Write(e.to_string()))?;
    }
    w.flush().map_err(|e| DataError::Write(e.to_string()))
}

pub fn write_table<T: Real>(m: &MaskedMatrix<T>, path: &Path, precision: Option<usize>) -> Result<(), DataError> {
    let file = File::create(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    write_table_to(m, std::io::BufWriter::new(file), precision)
}

pub(crate) fn format_value(v: f64, precision: Option<usize>) -> String {
    match precision {
        Some(p) => format!("{v:.p$}"),
        None => format!("{v}"),
    }
}

/// Common and file-specific column sets of a two-file match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilePattern {
    pub common: Vec<String>,
    pub specific1: Vec<String>,
    pub specific2: Vec<String>,
}

/// A [`FilePattern`] resolved against a column list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedPattern {
    pub common: Vec<usize>,
    pub specific1: Vec<usize>,
    pub specific2: Vec<usize>,
}

impl FilePattern {
    /// Checks the set invariants against `columns` and returns indices.
    pub fn resolve(&self, columns: &[String]) -> Result<ResolvedPattern, DataError> {
        if self.common.is_empty() {
            return Err(DataError::Pattern("the common set must not be empty".into()));
        }
        let index = |name: &String| columns.iter().position(|c| c == name).ok_or_else(|| DataError::UnknownColumn(name.clone()));
        let indices = |set: &[String]| set.iter().map(index).collect::<Result<Vec<_>, _>>();
        let resolved =
            ResolvedPattern { common: indices(&self.common)?, specific1: indices(&self.specific1)?, specific2: indices(&self.specific2)? };
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (set, label) in [(&self.common, "common"), (&self.specific1, "specific1"), (&self.specific2, "specific2")] {
            for name in set.iter() {
                if let Some(prev) = owner.insert(name, label) {
                    return Err(DataError::Pattern(format!("column `{name}` appears in both {prev} and {label}")));
                }
            }
        }
        if let Some(extra) = columns.iter().find(|c| !owner.contains_key(c.as_str())) {
            return Err(DataError::Pattern(format!("column `{extra}` is not assigned to any set")));
        }
        Ok(resolved)
    }
}

/// Hides the block each file does not measure: `specific2` for file-1
/// rows, `specific1` for file-2 rows. Rows with any other tag are left as
/// they are. Rows are re-tagged with `file_of_row`.
pub fn apply_pattern<T: Real>(m: &MaskedMatrix<T>, pattern: &FilePattern, file_of_row: &[FileTag]) -> Result<MaskedMatrix<T>, DataError> {
    if file_of_row.len() != m.nrows() {
        return Err(DataError::Shape(format!("{} tags for {} rows", file_of_row.len(), m.nrows())));
    }
    let resolved = pattern.resolve(m.columns())?;
    let mut out = m.clone();
    for (r, &tag) in file_of_row.iter().enumerate() {
        out.tags[r] = tag;
        let hidden = match tag {
            FileTag::File1 => &resolved.specific2,
            FileTag::File2 => &resolved.specific1,
            _ => continue,
        };
        for &j in hidden {
            out.hide(r, j);
        }
    }
    Ok(out)
}

/// Sizes and seed for the two-files-plus-holdout protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n1: usize,
    pub n2: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub pattern: FilePattern,
}

/// Output of [`split_for_matching`]. `*_rows` hold source row indices.
#[derive(Debug, Clone)]
pub struct MatchingSplit<T> {
    pub file1: MaskedMatrix<T>,
    pub file2: MaskedMatrix<T>,
    pub eval: MaskedMatrix<T>,
    pub file1_rows: Vec<usize>,
    pub file2_rows: Vec<usize>,
    pub eval_rows: Vec<usize>,
}

impl<T: Real> MatchingSplit<T> {
    /// Fully observed rows behind file 1.
    pub fn truth1(&self, source: &MaskedMatrix<T>) -> MaskedMatrix<T> {
        source.select_rows(&self.file1_rows).with_tag(FileTag::File1)
    }

    pub fn truth2(&self, source: &MaskedMatrix<T>) -> MaskedMatrix<T> {
        source.select_rows(&self.file2_rows).with_tag(FileTag::File2)
    }
}

/// Seeded permutation of all rows (ChaCha8 stream, Fisher–Yates shuffle).
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Permutes the rows with a seeded ChaCha8 shuffle and cuts them into
/// file 1, file 2 and a fully observed holdout set.
pub fn split_for_matching<T: Real>(m: &MaskedMatrix<T>, spec: &SplitSpec) -> Result<MatchingSplit<T>, DataError> {
    if spec.n1 == 0 || spec.n2 == 0 || spec.n_eval == 0 {
        return Err(DataError::SplitCount);
    }
    let needed = spec.n1 + spec.n2 + spec.n_eval;
    if needed > m.nrows() {
        return Err(DataError::SplitSize { needed, available: m.nrows() });
    }
    if let Some(i) = m.mask.iter().position(|&o| !o) {
        return Err(DataError::NotFullyObserved { row: i / m.ncols(), column: m.columns[i % m.ncols()].clone() });
    }
    spec.pattern.resolve(m.columns())?;

    let order = seeded_permutation(m.nrows(), spec.seed);
    let file1_rows = order[..spec.n1].to_vec();
    let file2_rows = order[spec.n1..spec.n1 + spec.n2].to_vec();
    let eval_rows = order[spec.n1 + spec.n2..needed].to_vec();

    let file1 = apply_pattern(&m.select_rows(&file1_rows), &spec.pattern, &vec![FileTag::File1; spec.n1])?;
    let file2 = apply_pattern(&m.select_rows(&file2_rows), &spec.pattern, &vec![FileTag::File2; spec.n2])?;
    let eval = m.select_rows(&eval_rows).with_tag(FileTag::Eval);
    Ok(MatchingSplit { file1, file2, eval, file1_rows, file2_rows, eval_rows })
}
