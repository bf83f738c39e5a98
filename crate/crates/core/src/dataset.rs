//! Tabular data loading, seeded nested splits, and fold-local scaling.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Single-column matrix.
    pub fn column_vector(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }
}

/// Features, target, and column names of a regression dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub features: Matrix,
    pub target: Vec<f64>,
    pub column_names: Vec<String>,
}

impl Table {
    pub fn new(features: Matrix, target: Vec<f64>, column_names: Vec<String>) -> Result<Self> {
        if features.rows() != target.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                got: target.len(),
            });
        }
        if column_names.len() != features.cols() {
            return Err(Error::DimensionMismatch {
                expected: features.cols(),
                got: column_names.len(),
            });
        }
        if target.len() < 10 {
            return Err(Error::InvalidData(format!(
                "need at least 10 rows, found {}",
                target.len()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::InvalidData("no feature columns".into()));
        }
        if features.as_slice().iter().chain(&target).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite value".into()));
        }
        Ok(Table {
            features,
            target,
            column_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Table {
        Table {
            features: self.features.select_rows(idx),
            target: idx.iter().map(|&i| self.target[i]).collect(),
            column_names: self.column_names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetColumn {
    Last,
    Name(String),
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    Comma,
    Semicolon,
    Tab,
    Whitespace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    Reject,
    Constant(f64),
}

/// How to interpret a delimited text file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub has_header: bool,
    pub delimiter: Delimiter,
    pub target: TargetColumn,
    /// Columns one-hot encoded (by header name, or `col<i>` without a header).
    pub categorical: Vec<String>,
    /// Columns ignored entirely.
    pub drop: Vec<String>,
    pub missing: MissingPolicy,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            has_header: true,
            delimiter: Delimiter::Comma,
            target: TargetColumn::Last,
            categorical: Vec::new(),
            drop: Vec::new(),
            missing: MissingPolicy::Reject,
        }
    }
}

const MISSING_TOKENS: [&str; 7] = ["", "na", "nan", "?", "null", "none", "n/a"];

fn is_missing(cell: &str) -> bool {
    let c = cell.trim().to_ascii_lowercase();
    MISSING_TOKENS.contains(&c.as_str())
}

fn read_records(path: &Path, schema: &Schema) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records: Vec<Vec<String>> = match schema.delimiter {
        Delimiter::Whitespace => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect(),
        d => {
            let sep = match d {
                Delimiter::Comma => b',',
                Delimiter::Semicolon => b';',
                _ => b'\t',
            };
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .delimiter(sep)
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes());
            let mut out = Vec::new();
            for rec in reader.records() {
                let rec = rec?;
                if rec.iter().all(|c| c.is_empty()) {
                    continue;
                }
                out.push(rec.iter().map(str::to_string).collect());
            }
            out
        }
    };
    if records.is_empty() {
        return Err(Error::InvalidData("file has no rows".into()));
    }
    let width = records[0].len();
    let header = if schema.has_header {
        records.remove(0)
    } else {
        (0..width).map(|i| format!("col{i}")).collect()
    };
    for (r, rec) in records.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(Error::InvalidData(format!(
                "row {r} has {} cells, header has {}",
                rec.len(),
                header.len()
            )));
        }
    }
    Ok((header, records))
}

/// Reads a delimited file into a [`Table`], one-hot encoding the configured
/// categorical columns. Row order is preserved.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Table> {
    let (header, records) = read_records(path.as_ref(), schema)?;
    let target_idx = match &schema.target {
        TargetColumn::Last => header.len().checked_sub(1),
        TargetColumn::Index(i) => (*i < header.len()).then_some(*i),
        TargetColumn::Name(n) => header.iter().position(|h| h == n),
    }
    .ok_or_else(|| Error::MissingTarget(format!("{:?}", schema.target)))?;

    for name in schema.categorical.iter().chain(&schema.drop) {
        if !header.contains(name) {
            return Err(Error::InvalidConfig(format!("schema names unknown column '{name}'")));
        }
    }

    let mut target = Vec::with_capacity(records.len());
    for (r, rec) in records.iter().enumerate() {
        let cell = &rec[target_idx];
        if is_missing(cell) {
            return Err(Error::MissingValue {
                row: r,
                column: header[target_idx].clone(),
            });
        }
        target.push(cell.parse::<f64>().map_err(|_| Error::NonNumeric {
            row: r,
            column: header[target_idx].clone(),
            value: cell.clone(),
        })?);
    }

    // Each kept column becomes one numeric column or several indicator columns.
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if c == target_idx || schema.drop.contains(name) {
            continue;
        }
        if schema.categorical.contains(name) {
            let levels: BTreeSet<&str> = records
                .iter()
                .map(|rec| rec[c].as_str())
                .filter(|v| !is_missing(v))
                .collect();
            for (r, rec) in records.iter().enumerate() {
                if is_missing(&rec[c]) && schema.missing == MissingPolicy::Reject {
                    return Err(Error::MissingValue {
                        row: r,
                        column: name.clone(),
                    });
                }
            }
            for level in levels {
                columns.push(
                    records
                        .iter()
                        .map(|rec| if rec[c] == level { 1.0 } else { 0.0 })
                        .collect(),
                );
                names.push(format!("{name}={level}"));
            }
            continue;
        }
        let mut col = Vec::with_capacity(records.len());
        for (r, rec) in records.iter().enumerate() {
            let cell = &rec[c];
            if is_missing(cell) {
                match schema.missing {
                    MissingPolicy::Reject => {
                        return Err(Error::MissingValue {
                            row: r,
                            column: name.clone(),
                        })
                    }
                    MissingPolicy::Constant(v) => col.push(v),
                }
                continue;
            }
            col.push(cell.parse::<f64>().map_err(|_| Error::NonNumeric {
                row: r,
                column: name.clone(),
                value: cell.clone(),
            })?);
        }
        columns.push(col);
        names.push(name.clone());
    }

    let n = records.len();
    let d = columns.len();
    let mut features = Matrix::zeros(n, d);
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            features.set(i, j, *v);
        }
    }
    Table::new(features, target, names)
}

/// Fractions used by [`make_split_plan`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    /// Share of all rows held out for testing.
    pub test: f64,
    /// Share of the outer training fold held out for calibration.
    pub cal: f64,
    /// Share of train-minus-calibration used for validation.
    pub va: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            test: 0.10,
            cal: 0.10,
            va: 0.20,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        for (name, f) in [("test", self.test), ("cal", self.cal), ("va", self.va)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} fraction {f} outside (0,1)")));
            }
        }
        Ok(())
    }
}

/// Nested index partition for one seeded run: TEST | CAL | (TR ∪ VA = TV).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub n: usize,
    pub test_idx: Vec<usize>,
    pub tv_idx: Vec<usize>,
    pub tr_idx: Vec<usize>,
    pub va_idx: Vec<usize>,
    pub cal_idx: Vec<usize>,
}

pub fn make_split_plan(n: usize, seed: u64, fractions: &SplitFractions) -> Result<SplitPlan> {
    fractions.validate()?;
    if n < 10 {
        return Err(Error::InvalidData(format!("need at least 10 rows, got {n}")));
    }
    let n_test = (fractions.test * n as f64).floor() as usize;
    let n_train = n - n_test;
    let n_cal = (fractions.cal * n_train as f64).floor() as usize;
    let n_tv = n_train - n_cal;
    let n_va = (fractions.va * n_tv as f64).floor() as usize;
    let n_tr = n_tv - n_va;
    for (name, size) in [("test", n_test), ("cal", n_cal), ("va", n_va), ("tr", n_tr)] {
        if size == 0 {
            return Err(Error::EmptyPartition(name));
        }
    }

    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);

    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let test_idx = sorted(&perm[..n_test]);
    let cal_idx = sorted(&perm[n_test..n_test + n_cal]);
    let tv = &perm[n_test + n_cal..];
    let va_idx = sorted(&tv[..n_va]);
    let tr_idx = sorted(&tv[n_va..]);
    let tv_idx = sorted(tv);
    Ok(SplitPlan {
        seed,
        n,
        test_idx,
        tv_idx,
        tr_idx,
        va_idx,
        cal_idx,
    })
}

impl SplitPlan {
    /// Checks the partition identities against the row count.
    pub fn validate(&self) -> Result<()> {
        let lists: [(&'static str, &Vec<usize>); 5] = [
            ("test", &self.test_idx),
            ("tv", &self.tv_idx),
            ("tr", &self.tr_idx),
            ("va", &self.va_idx),
            ("cal", &self.cal_idx),
        ];
        for (name, l) in lists {
            if l.is_empty() {
                return Err(Error::EmptyPartition(name));
            }
            if l.iter().any(|&i| i >= self.n) {
                return Err(Error::InvalidData(format!("{name} index out of range")));
            }
        }
        let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        let test = set(&self.test_idx);
        let tv = set(&self.tv_idx);
        let tr = set(&self.tr_idx);
        let va = set(&self.va_idx);
        let cal = set(&self.cal_idx);
        let disjoint = |a: &BTreeSet<usize>, b: &BTreeSet<usize>| a.is_disjoint(b);
        let ok = test.len() + tv.len() + cal.len() == self.n
            && disjoint(&test, &tv)
            && disjoint(&test, &cal)
            && disjoint(&tv, &cal)
            && disjoint(&tr, &va)
            && tr.union(&va).copied().collect::<BTreeSet<_>>() == tv
            && test.len() == self.test_idx.len()
            && tv.len() == self.tv_idx.len()
            && cal.len() == self.cal_idx.len()
            && tr.len() == self.tr_idx.len()
            && va.len() == self.va_idx.len();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidData("split plan violates partition identities".into()))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: SplitPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Draws `m` rows without replacement; output order follows the seeded shuffle.
pub fn subsample(table: &Table, m: usize, seed: u64) -> Result<Table> {
    if m > table.n_rows() {
        return Err(Error::InvalidConfig(format!(
            "cannot subsample {m} rows from {}",
            table.n_rows()
        )));
    }
    let mut perm: Vec<usize> = (0..table.n_rows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    perm.truncate(m);
    Ok(table.select_rows(&perm))
}

/// Affine z-score of a scalar target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScaler {
    pub mu: f64,
    pub sigma: f64,
}

const DEGENERATE_STD: f64 = 1e-12;

impl ZScaler {
    /// Population mean/std; a zero-variance input gets `sigma = 1`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidData("cannot fit a z-scaler on no values".into()));
        }
        let mu = stats::mean(values);
        let sd = stats::population_std(values);
        let sigma = if sd > DEGENERATE_STD * mu.abs().max(1.0) { sd } else { 1.0 };
        Ok(ZScaler { mu, sigma })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mu) / self.sigma
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sigma + self.mu
    }

    pub fn apply_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply(v)).collect()
    }

    pub fn invert_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.invert(v)).collect()
    }
}

/// Per-column standardization fitted on one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ColumnScaler {
    pub fn fit(features: &Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidData("cannot fit a column scaler on no rows".into()));
        }
        let mut means = Vec::with_capacity(features.cols());
        let mut stds = Vec::with_capacity(features.cols());
        for j in 0..features.cols() {
            let col = features.column(j);
            let m = stats::mean(&col);
            let s = stats::population_std(&col);
            means.push(m);
            stds.push(if s > DEGENERATE_STD * m.abs().max(1.0) { s } else { 1.0 });
        }
        Ok(ColumnScaler { means, stds })
    }

    pub fn transform(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.means.len(),
                got: features.cols(),
            });
        }
        let mut out = features.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.means[j]) / self.stds[j];
            }
        }
        Ok(out)
    }
}

/// Appends `anchor_z` as a trailing column.
pub fn augment_with_anchor(features: &Matrix, anchor_z: &[f64]) -> Result<Matrix> {
    if features.rows() != anchor_z.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: anchor_z.len(),
        });
    }
    let cols = features.cols() + 1;
    let mut data = Vec::with_capacity(features.rows() * cols);
    for (row, a) in features.iter_rows().zip(anchor_z) {
        data.extend_from_slice(row);
        data.push(*a);
    }
    Matrix::from_vec(features.rows(), cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn numeric_csv(rows: usize) -> String {
        let mut s = String::from("a,b,y\n");
        for i in 0..rows {
            s.push_str(&format!("{},{},{}\n", i, i * 2, i as f64 * 0.5));
        }
        s
    }

    #[test]
    fn loads_header_and_target() {
        let f = write_tmp(&numeric_csv(12));
        let t = load_csv(f.path(), &Schema::default()).unwrap();
        assert_eq!(t.n_rows(), 12);
        assert_eq!(t.n_features(), 2);
        assert_eq!(t.column_names, vec!["a", "b"]);
        assert_eq!(t.target[3], 1.5);
        assert_eq!(t.features.get(5, 1), 10.0);
    }

    #[test]
    fn nan_cell_is_rejected() {
        let f = write_tmp("a,y\n1,2\nNaN,3\n4,5\n");
        let err = load_csv(f.path(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::MissingValue { row: 1, .. }), "{err}");
        assert!(err.to_string().contains("missing value"));
    }

    #[test]
    fn constant_policy_imputes() {
        let mut s = numeric_csv(11);
        s.push_str("NA,3,4\n");
        let f = write_tmp(&s);
        let schema = Schema {
            missing: MissingPolicy::Constant(-1.0),
            ..Schema::default()
        };
        let t = load_csv(f.path(), &schema).unwrap();
        assert_eq!(t.features.get(11, 0), -1.0);
    }

    #[test]
    fn missing_file_and_target() {
        assert!(matches!(
            load_csv("/nonexistent/x.csv", &Schema::default()),
            Err(Error::Io { .. })
        ));
        let f = write_tmp(&numeric_csv(12));
        let schema = Schema {
            target: TargetColumn::Name("nope".into()),
            ..Schema::default()
        };
        assert!(matches!(load_csv(f.path(), &schema), Err(Error::MissingTarget(_))));
    }

    #[test]
    fn non_numeric_without_rule() {
        let mut s = numeric_csv(11);
        s.push_str("x,3,4\n");
        let f = write_tmp(&s);
        assert!(matches!(
            load_csv(f.path(), &Schema::default()),
            Err(Error::NonNumeric { .. })
        ));
    }

    #[test]
    fn one_hot_and_whitespace() {
        let mut s = String::new();
        for i in 0..12 {
            let c = ["red", "blue", "green"][i % 3];
            s.push_str(&format!("{i}   {c}  {}\n", i as f64 + 0.25));
        }
        let f = write_tmp(&s);
        let schema = Schema {
            has_header: false,
            delimiter: Delimiter::Whitespace,
            categorical: vec!["col1".into()],
            ..Schema::default()
        };
        let t = load_csv(f.path(), &schema).unwrap();
        assert_eq!(t.column_names, vec!["col0", "col1=blue", "col1=green", "col1=red"]);
        assert_eq!(t.features.row(0), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.features.row(1), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn split_sizes_n100() {
        let p = make_split_plan(100, 0, &SplitFractions::default()).unwrap();
        assert_eq!(p.test_idx.len(), 10);
        assert_eq!(p.cal_idx.len(), 9);
        assert_eq!(p.va_idx.len(), 16);
        assert_eq!(p.tr_idx.len(), 65);
        assert_eq!(p.tv_idx.len(), 81);
        p.validate().unwrap();
    }

    #[test]
    fn split_n10_errors_on_empty_partition() {
        match make_split_plan(10, 7, &SplitFractions::default()) {
            Ok(p) => p.validate().unwrap(),
            Err(e) => assert!(matches!(e, Error::EmptyPartition(_))),
        }
    }

    #[test]
    fn split_is_deterministic_and_roundtrips() {
        let a = make_split_plan(57, 3, &SplitFractions::default()).unwrap();
        let b = make_split_plan(57, 3, &SplitFractions::default()).unwrap();
        assert_eq!(a, b);
        let c = make_split_plan(57, 4, &SplitFractions::default()).unwrap();
        assert_ne!(a.test_idx, c.test_idx);
        assert_eq!(SplitPlan::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn partition_identities_exhaustive() {
        for n in 10..=200 {
            for seed in 0..3 {
                match make_split_plan(n, seed, &SplitFractions::default()) {
                    Ok(p) => p.validate().unwrap(),
                    Err(Error::EmptyPartition(_)) => assert!(n < 50, "n={n} failed"),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }

    #[test]
    fn subsample_bounds() {
        let f = write_tmp(&numeric_csv(20));
        let t = load_csv(f.path(), &Schema::default()).unwrap();
        let s = subsample(&t, 20, 1).unwrap();
        let mut a = s.target.clone();
        a.sort_by(f64::total_cmp);
        let mut b = t.target.clone();
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_ne!(s.target, t.target);
        assert_eq!(subsample(&t, 7, 1).unwrap().n_rows(), 7);
        assert!(subsample(&t, 21, 1).is_err());
    }

    #[test]
    fn zscaler_cases() {
        let z = ZScaler::fit(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(z.mu, 2.0);
        assert!((z.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let c = ZScaler::fit(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((c.mu, c.sigma), (5.0, 1.0));
        let w = ZScaler::fit(&[-1.0, 0.0, 4.0]).unwrap();
        for v in [-1.0, 0.0, 4.0] {
            let back = w.invert(w.apply(v));
            assert!((back - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
        assert!(ZScaler::fit(&[]).is_err());
    }

    #[test]
    fn column_scaler_zero_variance() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0], vec![1.0, 5.0]]).unwrap();
        let s = ColumnScaler::fit(&m).unwrap();
        assert_eq!(s.stds[0], 1.0);
        assert_eq!(s.stds[1], 1.0);
        let t = s.transform(&m).unwrap();
        assert_eq!(t.row(0), &[0.0, -1.0]);
    }

    #[test]
    fn augment_cases() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let a = augment_with_anchor(&m, &[0.5, -0.5]).unwrap();
        assert_eq!(a.cols(), 4);
        assert_eq!(a.row(0), &[1.0, 2.0, 3.0, 0.5]);
        assert_eq!(a.column(3), vec![0.5, -0.5]);
        assert!(augment_with_anchor(&m, &[]).is_err());
    }
}
