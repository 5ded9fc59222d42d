//! Tabular background datasets.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;

use crate::error::{AttrError, Result};
use crate::rng;

/// Largest feature count the coalition bitmasks support.
pub const MAX_FEATURES: usize = 64;

/// An immutable N×d matrix of finite reals with cached column means.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    values: Array2<f64>,
    feature_names: Vec<String>,
    column_means: Array1<f64>,
    labels: Option<Vec<f64>>,
}

impl TabularDataset {
    pub fn new(values: Array2<f64>, feature_names: Vec<String>) -> Result<Self> {
        let (n, d) = values.dim();
        if n < 1 {
            return Err(AttrError::InvalidArgument("dataset needs at least one row".into()));
        }
        if d < 2 {
            return Err(AttrError::InvalidArgument("dataset needs at least two features".into()));
        }
        if d > MAX_FEATURES {
            return Err(AttrError::TooManyFeatures { got: d, limit: MAX_FEATURES });
        }
        if feature_names.len() != d {
            return Err(AttrError::DimensionMismatch { expected: d, got: feature_names.len() });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(AttrError::InvalidArgument(format!(
                "non-finite value in row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        let column_means = values.mean_axis(Axis(0)).expect("n >= 1");
        Ok(Self { values, feature_names, column_means, labels: None })
    }

    /// Builds a dataset with generated names `x0, x1, ...`.
    pub fn from_array(values: Array2<f64>) -> Result<Self> {
        let names = (0..values.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(values, names)
    }

    pub fn with_labels(mut self, labels: Vec<f64>) -> Result<Self> {
        if labels.len() != self.n_rows() {
            return Err(AttrError::DimensionMismatch { expected: self.n_rows(), got: labels.len() });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn column_means(&self) -> &Array1<f64> {
        &self.column_means
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let values = self.values.select(Axis(0), rows);
        let mut out = Self::new(values, self.feature_names.clone())?;
        if let Some(labels) = &self.labels {
            out.labels = Some(rows.iter().map(|&i| labels[i]).collect());
        }
        Ok(out)
    }

    /// Shuffled split into `(train, test)` with `train_fraction` of the rows
    /// (rounded down, at least one row on each side).
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let n = self.n_rows();
        if n < 2 || !(0.0..1.0).contains(&train_fraction) {
            return Err(AttrError::InvalidArgument("cannot split dataset".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[0x5917]));
        let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
        let (train, test) = order.split_at(n_train);
        Ok((self.select_rows(train)?, self.select_rows(test)?))
    }

    /// Reads a CSV file with a header row. When `has_label` is set the last
    /// column is kept aside as a label and excluded from the features.
    pub fn from_csv_path(path: impl AsRef<Path>, has_label: bool) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, has_label)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R, has_label: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| parse_error(1, 1, e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect::<Vec<_>>();
        let width = header.len();
        let d = if has_label { width.saturating_sub(1) } else { width };
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        let mut rows = 0usize;
        for (i, record) in rdr.records().enumerate() {
            // Line 1 is the header.
            let line = i + 2;
            let record = record.map_err(|e| parse_error(line, 1, e.to_string()))?;
            if record.len() != width {
                return Err(parse_error(
                    line,
                    record.len().min(width) + 1,
                    format!("row {} has {} fields, expected {width}", i + 1, record.len()),
                ));
            }
            for (c, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    parse_error(line, c + 1, format!("row {}: cannot parse {field:?} as a number", i + 1))
                })?;
                if c < d {
                    flat.push(v);
                } else {
                    labels.push(v);
                }
            }
            rows += 1;
        }
        let values = Array2::from_shape_vec((rows, d), flat)
            .map_err(|e| AttrError::InvalidArgument(e.to_string()))?;
        let ds = Self::new(values, header[..d].to_vec())?;
        if has_label {
            ds.with_labels(labels)
        } else {
            Ok(ds)
        }
    }
}

fn parse_error(line: usize, column: usize, message: String) -> AttrError {
    AttrError::Parse { line, column, message }
}
