//! Time-indexed signal data: trajectories, datasets, CSV ingestion and normalization.

use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::mean_std;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory must contain at least one row")]
    Empty,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("sampling interval must be positive, got {0}")]
    BadDt(f64),
    #[error("expected {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("insufficient history: k = {k} < T_ini = {t_ini}")]
    InsufficientHistory { k: usize, t_ini: usize },
    #[error("T_ini must be at least 1")]
    ZeroWindow,
    #[error("index {k} out of range for trajectory of length {len}")]
    OutOfRange { k: usize, len: usize },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column `{col}`")]
    NonNumericCell { row: usize, col: String },
    #[error("file has no data rows")]
    EmptyFile,
    #[error("signals have mismatched lengths or sampling: {0}")]
    Mismatch(String),
    #[error("hankel split {hankel} leaves no training rows out of {total}")]
    BadSplit { hankel: usize, total: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

/// Multi-dimensional signal sampled at a fixed interval; rows are time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    values: DMatrix<f64>,
    dt: f64,
    labels: Vec<String>,
}

impl Trajectory {
    pub fn new(values: DMatrix<f64>, dt: f64, labels: Vec<String>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(TrajectoryError::Empty);
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(TrajectoryError::BadDt(dt));
        }
        if labels.len() != values.ncols() {
            return Err(TrajectoryError::LabelCount {
                expected: values.ncols(),
                got: labels.len(),
            });
        }
        for r in 0..values.nrows() {
            for c in 0..values.ncols() {
                if !values[(r, c)].is_finite() {
                    return Err(TrajectoryError::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(Self { values, dt, labels })
    }

    /// Trajectory with generated labels `prefix1..prefixN`.
    pub fn unlabeled(values: DMatrix<f64>, dt: f64, prefix: &str) -> Result<Self> {
        let labels = (1..=values.ncols()).map(|i| format!("{prefix}{i}")).collect();
        Self::new(values, dt, labels)
    }

    /// Builds a trajectory from row vectors (all of equal length).
    pub fn from_rows(rows: &[DVector<f64>], dt: f64, prefix: &str) -> Result<Self> {
        if rows.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(TrajectoryError::Mismatch("rows of unequal dimension".into()));
        }
        let values = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        Self::unlabeled(values, dt, prefix)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Signal dimension.
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, k: usize) -> DVector<f64> {
        self.values.row(k).transpose()
    }

    /// Contiguous sub-trajectory `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if end > self.len() || start >= end {
            return Err(TrajectoryError::OutOfRange { k: end, len: self.len() });
        }
        Ok(Self {
            values: self.values.rows(start, end - start).into_owned(),
            dt: self.dt,
            labels: self.labels.clone(),
        })
    }

    /// Keeps only the listed columns.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let values = self.values.select_columns(cols);
        let labels = cols.iter().map(|&c| self.labels[c].clone()).collect();
        Self::new(values, self.dt, labels)
    }

    /// The `T_ini` rows strictly before time index `k`.
    pub fn window_ini(&self, k: usize, t_ini: usize) -> Result<Self> {
        if t_ini == 0 {
            return Err(TrajectoryError::ZeroWindow);
        }
        if k < t_ini {
            return Err(TrajectoryError::InsufficientHistory { k, t_ini });
        }
        if k > self.len() {
            return Err(TrajectoryError::OutOfRange { k, len: self.len() });
        }
        self.slice(k - t_ini, k)
    }

    /// Row-major stacking `[x_0; x_1; ...]` as one column vector.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(self.len() * self.dim(), self.values.transpose().iter().cloned())
    }
}

/// Index partition of a dataset: the first `hankel_len` rows build Hankel matrices,
/// the remaining rows train the networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub hankel_len: usize,
    pub total: usize,
}

impl Split {
    pub fn hankel(&self) -> std::ops::Range<usize> {
        0..self.hankel_len
    }

    pub fn train(&self) -> std::ops::Range<usize> {
        self.hankel_len..self.total
    }
}

/// Open-loop record of inputs, outputs and economic cost with a Hankel/train split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub u: Trajectory,
    pub y: Trajectory,
    pub c: Trajectory,
    /// Columns of `y` carrying hard constraints (the `y^c` subset).
    pub constrained: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        u: Trajectory,
        y: Trajectory,
        c: Trajectory,
        constrained: Vec<usize>,
        hankel_len: usize,
    ) -> Result<Self> {
        let n = u.len();
        if y.len() != n || c.len() != n {
            return Err(TrajectoryError::Mismatch(format!(
                "u has {} rows, y {}, c {}",
                n,
                y.len(),
                c.len()
            )));
        }
        if u.dt() != y.dt() || u.dt() != c.dt() {
            return Err(TrajectoryError::Mismatch("sampling intervals differ".into()));
        }
        if c.dim() != 1 {
            return Err(TrajectoryError::Mismatch("cost must be one column".into()));
        }
        if let Some(&bad) = constrained.iter().find(|&&i| i >= y.dim()) {
            return Err(TrajectoryError::Mismatch(format!(
                "constrained column {bad} outside output dimension {}",
                y.dim()
            )));
        }
        if hankel_len == 0 || hankel_len >= n {
            return Err(TrajectoryError::BadSplit { hankel: hankel_len, total: n });
        }
        Ok(Self { u, y, c, constrained, split: Split { hankel_len, total: n } })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.u.dim()
    }

    pub fn n_y(&self) -> usize {
        self.y.dim()
    }

    pub fn n_c(&self) -> usize {
        self.constrained.len()
    }

    pub fn dt(&self) -> f64 {
        self.u.dt()
    }

    /// The constrained outputs `y^c` as a `rows x n_c` matrix.
    pub fn constrained_outputs(&self) -> DMatrix<f64> {
        self.y.values().select_columns(&self.constrained)
    }

    pub fn costs(&self) -> DVector<f64> {
        self.c.values().column(0).into_owned()
    }

    /// Writes a CSV with one header line: inputs, outputs, then the cost column.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<&str> = self
            .u
            .labels()
            .iter()
            .chain(self.y.labels())
            .chain(self.c.labels())
            .map(String::as_str)
            .collect();
        w.write_record(&header)?;
        for k in 0..self.len() {
            let rec: Vec<String> = self
                .u
                .values()
                .row(k)
                .iter()
                .chain(self.y.values().row(k).iter())
                .chain(self.c.values().row(k).iter())
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// The column schema matching this dataset's labels.
    pub fn schema(&self) -> ColumnSchema {
        ColumnSchema {
            inputs: self.u.labels().to_vec(),
            outputs: self.y.labels().to_vec(),
            cost: self.c.labels()[0].clone(),
            constrained: self.constrained.iter().map(|&i| self.y.labels()[i].clone()).collect(),
            dt: self.dt(),
            hankel_len: self.split.hankel_len,
        }
    }
}

/// Declares which CSV columns play which role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub cost: String,
    #[serde(default)]
    pub constrained: Vec<String>,
    pub dt: f64,
    /// Number of leading rows reserved for Hankel construction (`T`).
    pub hankel_len: usize,
}

/// Reads a dataset CSV according to `schema`.
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| TrajectoryError::MissingColumn(name.to_string()))
    };
    let u_idx = schema.inputs.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
    let y_idx = schema.outputs.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
    let c_idx = find(&schema.cost)?;
    let constrained = schema
        .constrained
        .iter()
        .map(|n| {
            schema
                .outputs
                .iter()
                .position(|o| o == n)
                .ok_or_else(|| TrajectoryError::MissingColumn(n.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut u_rows = Vec::new();
    let mut y_rows = Vec::new();
    let mut c_rows = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |idx: usize| -> Result<f64> {
            let cell = rec.get(idx).unwrap_or("").trim();
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(TrajectoryError::NonNumericCell {
                    row,
                    col: headers.get(idx).unwrap_or("?").to_string(),
                }),
            }
        };
        u_rows.extend(u_idx.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?);
        y_rows.extend(y_idx.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?);
        c_rows.push(parse(c_idx)?);
    }
    let n = c_rows.len();
    if n == 0 {
        return Err(TrajectoryError::EmptyFile);
    }
    let u = Trajectory::new(
        DMatrix::from_row_slice(n, u_idx.len(), &u_rows),
        schema.dt,
        schema.inputs.clone(),
    )?;
    let y = Trajectory::new(
        DMatrix::from_row_slice(n, y_idx.len(), &y_rows),
        schema.dt,
        schema.outputs.clone(),
    )?;
    let c = Trajectory::new(DMatrix::from_column_slice(n, 1, &c_rows), schema.dt, vec![schema.cost.clone()])?;
    Dataset::new(u, y, c, constrained, schema.hankel_len)
}

/// Smallest scale used for (near-)constant columns.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Per-column affine normalization `(x - shift) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub shift: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self { shift: DVector::zeros(dim), scale: DVector::from_element(dim, 1.0) }
    }

    /// Column mean and sample standard deviation (floored at [`SCALE_FLOOR`]).
    pub fn fit(t: &Trajectory) -> Self {
        Self::fit_matrix(t.values())
    }

    pub fn fit_matrix(m: &DMatrix<f64>) -> Self {
        let dim = m.ncols();
        let mut shift = DVector::zeros(dim);
        let mut scale = DVector::zeros(dim);
        for j in 0..dim {
            let col: Vec<f64> = m.column(j).iter().cloned().collect();
            let (mean, std) = mean_std(&col);
            shift[j] = mean;
            scale[j] = std.max(SCALE_FLOOR);
        }
        Self { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn normalize(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.shift[j]) / self.scale[j]);
        }
        out
    }

    pub fn denormalize(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = *v * self.scale[j] + self.shift[j]);
        }
        out
    }

    pub fn normalize_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        v.zip_zip_map(&self.shift, &self.scale, |x, s, k| (x - s) / k)
    }

    pub fn normalize_row(&self, v: &DVector<f64>) -> RowDVector<f64> {
        self.normalize_vec(v).transpose()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.shift.iter().chain(self.scale.iter()).cloned().collect()
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Option<Self> {
        if flat.len() != 2 * dim {
            return None;
        }
        Some(Self {
            shift: DVector::from_column_slice(&flat[..dim]),
            scale: DVector::from_column_slice(&flat[dim..]),
        })
    }
}

/// Normalizers for the two network inputs (`u` before the input lifting, `y` before the output lifting).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkNormalizers {
    pub u: Normalizer,
    pub y: Normalizer,
}

/// Fits input/output normalizers on the whole dataset.
pub fn fit_normalizer(d: &Dataset) -> NetworkNormalizers {
    NetworkNormalizers { u: Normalizer::fit(&d.u), y: Normalizer::fit(&d.y) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn scalar(vals: &[f64]) -> Trajectory {
        Trajectory::unlabeled(DMatrix::from_column_slice(vals.len(), 1, vals), 1.0, "x").unwrap()
    }

    fn write_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema_1x1(hankel_len: usize) -> ColumnSchema {
        ColumnSchema {
            inputs: vec!["u1".into()],
            outputs: vec!["y1".into()],
            cost: "c".into(),
            constrained: vec!["y1".into()],
            dt: 1.0,
            hankel_len,
        }
    }

    #[test]
    fn loads_four_row_file() {
        let f = write_file("u1,y1,c\n1,2,3\n4,5,6\n7,8,9\n10,11,12\n");
        let d = load_csv(f.path(), &schema_1x1(2)).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.n_u(), 1);
        assert_eq!(d.n_y(), 1);
        assert_eq!(d.split.train(), 2..4);
        assert_eq!(d.y.values()[(3, 0)], 11.0);
    }

    #[test]
    fn nan_cell_is_rejected() {
        let f = write_file("u1,y1,c\n1,NaN,3\n4,5,6\n");
        match load_csv(f.path(), &schema_1x1(1)) {
            Err(TrajectoryError::NonNumericCell { row: 0, col }) => assert_eq!(col, "y1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_empty_file() {
        let f = write_file("u1,c\n1,3\n");
        assert!(matches!(load_csv(f.path(), &schema_1x1(1)), Err(TrajectoryError::MissingColumn(c)) if c == "y1"));
        let f = write_file("u1,y1,c\n");
        assert!(matches!(load_csv(f.path(), &schema_1x1(1)), Err(TrajectoryError::EmptyFile)));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let u = Trajectory::unlabeled(DMatrix::from_fn(5, 2, |i, j| (i as f64 + 0.1) * (j as f64 - 0.37) / 3.0), 0.5, "u").unwrap();
        let y = Trajectory::unlabeled(DMatrix::from_fn(5, 1, |i, _| (i as f64).sin() * 1e5), 0.5, "y").unwrap();
        let c = Trajectory::new(DMatrix::from_fn(5, 1, |i, _| 1.0 / (i as f64 + 3.0)), 0.5, vec!["c".into()]).unwrap();
        let d = Dataset::new(u, y, c, vec![0], 3).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        d.save_csv(f.path()).unwrap();
        let back = load_csv(f.path(), &d.schema()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn default_shaped_split() {
        let n = 4500;
        let u = Trajectory::unlabeled(DMatrix::from_fn(n, 2, |i, j| (i * (j + 1)) as f64), 1.0, "u").unwrap();
        let y = Trajectory::unlabeled(DMatrix::from_fn(n, 43, |i, j| (i + j) as f64), 1.0, "y").unwrap();
        let c = Trajectory::unlabeled(DMatrix::zeros(n, 1), 1.0, "c").unwrap();
        let d = Dataset::new(u, y, c, vec![0, 1], 1000).unwrap();
        assert_eq!(d.split.hankel().len(), 1000);
        assert_eq!(d.split.train().len(), 3500);
    }

    #[test]
    fn window_ini_cases() {
        let t = scalar(&[0.0, 1.0, 2.0, 3.0]);
        let w = t.window_ini(3, 2).unwrap();
        assert_eq!(w.values().as_slice(), &[1.0, 2.0]);
        assert!(matches!(t.window_ini(1, 2), Err(TrajectoryError::InsufficientHistory { .. })));
        assert_eq!(t.window_ini(2, 2).unwrap().values().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn normalizer_examples() {
        let n = Normalizer::fit(&scalar(&[1.0, 1.0, 1.0]));
        assert_eq!(n.shift[0], 1.0);
        assert_eq!(n.scale[0], SCALE_FLOOR);
        assert!(n.normalize(&DMatrix::from_element(3, 1, 1.0)).iter().all(|&v| v == 0.0));

        let n = Normalizer::fit(&scalar(&[0.0, 2.0]));
        assert_eq!(n.shift[0], 1.0);
        assert!((n.scale[0] - 2.0_f64.sqrt()).abs() < 1e-15);

        let m = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 2.0, 30.0, 3.0, 20.0]);
        let n = Normalizer::fit_matrix(&m);
        assert_eq!(n.shift, DVector::from_vec(vec![2.0, 20.0]));
        assert!((n.scale[1] / n.scale[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_trajectories() {
        assert!(Trajectory::unlabeled(DMatrix::zeros(0, 1), 1.0, "x").is_err());
        assert!(Trajectory::unlabeled(DMatrix::zeros(2, 1), 0.0, "x").is_err());
        assert!(Trajectory::unlabeled(DMatrix::from_element(2, 1, f64::INFINITY), 1.0, "x").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 2..40)) {
                let m = DMatrix::from_column_slice(vals.len() / 2, 2, &vals[..(vals.len() / 2) * 2]);
                prop_assume!(m.nrows() >= 1);
                let n = Normalizer::fit_matrix(&m);
                let back = n.denormalize(&n.normalize(&m));
                // rounding scales with the column's shift and spread, not the single entry
                for j in 0..m.ncols() {
                    let mag = m.column(j).amax().max(1.0);
                    for (a, b) in back.column(j).iter().zip(m.column(j).iter()) {
                        prop_assert!((a - b).abs() <= 1e-12 * mag);
                    }
                }
            }

            #[test]
            fn normalized_columns_are_standard(vals in prop::collection::vec(-1e3f64..1e3, 3..30)) {
                let m = DMatrix::from_column_slice(vals.len(), 1, &vals);
                let n = Normalizer::fit_matrix(&m);
                prop_assume!(n.scale[0] > 1e-6);
                let z: Vec<f64> = n.normalize(&m).iter().cloned().collect();
                let (mean, std) = mean_std(&z);
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((std - 1.0).abs() < 1e-10);
            }

            #[test]
            fn window_is_contiguous_slice(len in 1usize..30, t_ini in 1usize..10, k_off in 0usize..30) {
                let vals: Vec<f64> = (0..len).map(|i| i as f64).collect();
                let t = scalar(&vals);
                prop_assume!(t_ini <= len);
                let k = t_ini + k_off % (len - t_ini + 1);
                let w = t.window_ini(k, t_ini).unwrap();
                prop_assert_eq!(w.len(), t_ini);
                prop_assert_eq!(w.values().as_slice(), &vals[k - t_ini..k]);
            }
        }
    }
}
