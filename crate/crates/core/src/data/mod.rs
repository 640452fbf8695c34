//! Dataset matrices, seeded splits, train-only standardization, batching and
//! toy generators.

mod io;
mod toy;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;

pub use io::{load_matrix, parse_csv, parse_raw_f32, save_csv, save_raw_f32, to_raw_f32, Format};
pub use toy::{gauss_mixture_8_log_density, gauss_mixture_8_oracle_nll, toy_generate, Toy};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("column `{column}` has zero variance")]
    ZeroVariance { column: String },
    #[error("dimension mismatch: expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("unknown toy dataset `{0}` (expected gauss_mixture_8, two_moons or ring)")]
    UnknownToy(String),
}

/// Row-major `rows × cols` matrix of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    names: Option<Vec<String>>,
}

impl DatasetMatrix {
    /// Rejects ragged buffers, empty matrices and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if rows == 0 || cols == 0 {
            return Err(DataError::Empty);
        }
        if data.len() != rows * cols {
            return Err(DataError::Parse {
                location: "buffer".into(),
                message: format!("{} values do not fill {rows}×{cols}", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { row: i / cols });
        }
        Ok(Self {
            rows,
            cols,
            data,
            names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self, DataError> {
        if names.len() != self.cols {
            return Err(DataError::DimensionMismatch {
                expected: self.cols,
                found: names.len(),
            });
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_name(&self, c: usize) -> String {
        match &self.names {
            Some(n) => n[c].clone(),
            None => c.to_string(),
        }
    }

    /// New matrix holding the given rows in order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self, DataError> {
        let data = idx.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        let mut out = Self::new(idx.len(), self.cols, data)?;
        out.names = self.names.clone();
        Ok(out)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.data.clone()).expect("non-empty matrix")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, DataError> {
        if t.rank() != 2 {
            return Err(DataError::DimensionMismatch {
                expected: 2,
                found: t.rank(),
            });
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: DatasetMatrix,
    pub val: DatasetMatrix,
    pub test: DatasetMatrix,
}

/// Seeded shuffled partition into train/validation/test.
pub fn make_splits(matrix: &DatasetMatrix, fractions: [f64; 3], seed: u64) -> Result<Splits, DataError> {
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(DataError::InvalidSplit("fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidSplit(format!("fractions sum to {total}, not 1")));
    }
    let n = matrix.rows();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = n.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_test == 0 || n_train + n_val + n_test != n {
        return Err(DataError::InvalidSplit(format!(
            "{n} rows cannot be split into non-empty parts with fractions {fractions:?}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Splits {
        train: matrix.select_rows(&idx[..n_train])?,
        val: matrix.select_rows(&idx[n_train..n_train + n_val])?,
        test: matrix.select_rows(&idx[n_train + n_val..])?,
    })
}

/// Per-column shift and scale computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    /// Population mean and standard deviation of every column.
    pub fn fit(train: &DatasetMatrix) -> Result<Self, DataError> {
        let (n, d) = (train.rows() as f64, train.cols());
        let mut mean = vec![0.0; d];
        for r in 0..train.rows() {
            for (m, v) in mean.iter_mut().zip(train.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..train.rows() {
            for ((s, v), m) in var.iter_mut().zip(train.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(DataError::ZeroVariance {
                column: train.column_name(c),
            });
        }
        Ok(Self { mean, std })
    }

    /// No-op statistics for `dim` columns.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, m: &DatasetMatrix) -> Result<DatasetMatrix, DataError> {
        self.check(m)?;
        let d = m.cols();
        let data = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        let mut out = DatasetMatrix::new(m.rows(), d, data)?;
        out.names = m.names.clone();
        Ok(out)
    }

    /// Map standardized rows back to the raw data scale.
    pub fn invert(&self, m: &DatasetMatrix) -> Result<DatasetMatrix, DataError> {
        self.check(m)?;
        let d = m.cols();
        let data = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect();
        DatasetMatrix::new(m.rows(), d, data)
    }

    /// `log |det|` of the raw → standardized map, `−Σ log std`. Adding it to
    /// a standardized-space log-density gives the raw-space log-density.
    pub fn log_jacobian(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn check(&self, m: &DatasetMatrix) -> Result<(), DataError> {
        if m.cols() != self.dim() {
            return Err(DataError::DimensionMismatch {
                expected: self.dim(),
                found: m.cols(),
            });
        }
        Ok(())
    }
}

/// Standardize every split with statistics from the training split alone.
pub fn standardize(splits: &Splits) -> Result<(Splits, StandardizationStats), DataError> {
    let stats = StandardizationStats::fit(&splits.train)?;
    let out = Splits {
        train: stats.apply(&splits.train)?,
        val: stats.apply(&splits.val)?,
        test: stats.apply(&splits.test)?,
    };
    Ok((out, stats))
}

/// One epoch of shuffled mini-batches; the final batch may be short.
pub struct Batches<'a> {
    matrix: &'a DatasetMatrix,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// The shuffle for `(seed, epoch)` is fixed; different epochs reorder.
pub fn batches(matrix: &DatasetMatrix, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..matrix.rows()).collect();
    order.shuffle(&mut rng);
    Batches {
        matrix,
        order,
        batch_size,
        pos: 0,
    }
}

impl Iterator for Batches<'_> {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let d = self.matrix.cols();
        let mut data = Vec::with_capacity((end - self.pos) * d);
        for &r in &self.order[self.pos..end] {
            data.extend_from_slice(self.matrix.row(r));
        }
        let t = Tensor::matrix(end - self.pos, d, data).expect("non-empty batch");
        self.pos = end;
        Some(t)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn counting(n: usize, d: usize) -> DatasetMatrix {
        DatasetMatrix::new(n, d, (0..n * d).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let m = counting(100, 2);
        let s = make_splits(&m, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.rows(), s.val.rows(), s.test.rows()), (80, 10, 10));
        assert_eq!(s, make_splits(&m, [0.8, 0.1, 0.1], 3).unwrap());
        let mut seen: Vec<f64> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|p| (0..p.rows()).map(|r| p.row(r)[0]).collect::<Vec<_>>())
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..100).map(|r| (2 * r) as f64).collect::<Vec<_>>());
    }

    #[test]
    fn different_seeds_permute_differently() {
        let m = counting(1000, 1);
        let a = make_splits(&m, [0.8, 0.1, 0.1], 1).unwrap();
        let b = make_splits(&m, [0.8, 0.1, 0.1], 2).unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn invalid_fractions() {
        let m = counting(100, 1);
        assert!(matches!(make_splits(&m, [0.8, 0.1, 0.2], 0), Err(DataError::InvalidSplit(_))));
        assert!(matches!(make_splits(&m, [1.0, 0.0, 0.0], 0), Err(DataError::InvalidSplit(_))));
        assert!(matches!(make_splits(&counting(3, 1), [0.8, 0.1, 0.1], 0), Err(DataError::InvalidSplit(_))));
    }

    fn random_splits(seed: u64) -> Splits {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DatasetMatrix::new(200, 3, (0..600).map(|i| rng.random_range(-5.0..5.0) * (1 + i % 3) as f64 + 2.0).collect()).unwrap();
        make_splits(&m, [0.7, 0.15, 0.15], seed).unwrap()
    }

    #[test]
    fn standardized_train_has_zero_mean_unit_std() {
        let (s, stats) = standardize(&random_splits(1)).unwrap();
        let again = StandardizationStats::fit(&s.train).unwrap();
        for c in 0..3 {
            assert!(again.mean[c].abs() < 1e-12);
            assert!((again.std[c] - 1.0).abs() < 1e-12);
        }
        assert_eq!(stats.dim(), 3);
        let back = stats.invert(&s.test).unwrap();
        let orig = random_splits(1).test;
        for (a, b) in back.data().iter().zip(orig.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn already_standard_data_is_unchanged() {
        let (once, _) = standardize(&random_splits(2)).unwrap();
        let (twice, _) = standardize(&once).unwrap();
        for (a, b) in once.train.data().iter().zip(twice.train.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_is_rejected() {
        let m = DatasetMatrix::new(10, 2, (0..20).map(|i| if i % 2 == 0 { 5.0 } else { i as f64 }).collect())
            .unwrap()
            .with_names(vec!["flat".into(), "x".into()])
            .unwrap();
        match StandardizationStats::fit(&m) {
            Err(DataError::ZeroVariance { column }) => assert_eq!(column, "flat"),
            other => panic!("expected zero-variance error, got {other:?}"),
        }
    }

    #[test]
    fn stats_ignore_validation_and_test_rows() {
        let s = random_splits(3);
        let (_, a) = standardize(&s).unwrap();
        let mut changed = s.clone();
        changed.val = DatasetMatrix::new(changed.val.rows(), 3, vec![1e6; changed.val.rows() * 3]).unwrap();
        changed.test = DatasetMatrix::new(changed.test.rows(), 3, vec![-7.0; changed.test.rows() * 3]).unwrap();
        let (_, b) = standardize(&changed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_sizes_and_permutation() {
        let m = counting(10, 1);
        let sizes: Vec<usize> = batches(&m, 4, 0, 0).map(|b| b.shape()[0]).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<f64> = batches(&m, 4, 0, 0).flat_map(|b| b.into_data()).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_reorder() {
        let m = counting(50, 1);
        let a: Vec<f64> = batches(&m, 8, 7, 0).flat_map(|b| b.into_data()).collect();
        let b: Vec<f64> = batches(&m, 8, 7, 1).flat_map(|b| b.into_data()).collect();
        let again: Vec<f64> = batches(&m, 8, 7, 0).flat_map(|b| b.into_data()).collect();
        assert_ne!(a, b);
        assert_eq!(a, again);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(matches!(
            DatasetMatrix::new(2, 2, vec![1.0, 2.0, f64::NAN, 3.0]),
            Err(DataError::NonFinite { row: 1 })
        ));
    }
}
