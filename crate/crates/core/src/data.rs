//! Small seeded datasets and the CSV loader.

use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Moons,
    DigitsCsv,
}

/// Generation parameters. `dim`, `classes` and `separation` are ignored for
/// moons (always 2-D, 2 classes); `samples`, `dim` and `separation` are
/// ignored for CSV input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub kind: DatasetKind,
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    /// Standard deviation of blob centers.
    pub separation: f64,
    /// Standard deviation of per-point noise.
    pub noise: f64,
    pub test_fraction: f64,
    pub csv_path: Option<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Blobs,
            samples: 1200,
            dim: 8,
            classes: 4,
            separation: 1.0,
            noise: 1.0,
            test_fraction: 0.25,
            csv_path: None,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidParams(m));
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must be in (0, 1), got {}", self.test_fraction));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        match self.kind {
            DatasetKind::Blobs => {
                if self.dim == 0 || self.classes < 2 || self.samples < self.classes {
                    return bad(format!(
                        "blobs need dim >= 1, classes >= 2, samples >= classes (got {}, {}, {})",
                        self.dim, self.classes, self.samples
                    ));
                }
                if !(self.separation >= 0.0) {
                    return bad(format!("separation must be >= 0, got {}", self.separation));
                }
            }
            DatasetKind::Moons => {
                if self.samples < 2 {
                    return bad(format!("moons need samples >= 2, got {}", self.samples));
                }
            }
            DatasetKind::DigitsCsv => {
                if self.csv_path.is_none() {
                    return bad("digits_csv needs csv_path".into());
                }
                if self.classes < 2 {
                    return bad(format!("classes must be >= 2, got {}", self.classes));
                }
            }
        }
        Ok(())
    }
}

/// Labeled rows with a fixed train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.inputs.rows_cols().1
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn test_split(&self) -> (Tensor, Vec<usize>) {
        self.subset(&self.test)
    }
}

pub fn make_dataset(spec: &DataSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, labels, classes) = match spec.kind {
        DatasetKind::Blobs => {
            let (x, y) = blobs(spec, &mut rng);
            (x, y, spec.classes)
        }
        DatasetKind::Moons => {
            let (x, y) = moons(spec.samples, spec.noise, &mut rng);
            (x, y, 2)
        }
        DatasetKind::DigitsCsv => {
            let path = spec.csv_path.as_ref().unwrap();
            let text = fs::read_to_string(path).map_err(|source| DataError::Io {
                path: path.clone(),
                source,
            })?;
            let (x, y) = parse_digits_csv(&text, spec.classes)?;
            (x, y, spec.classes)
        }
    };
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = ((n as f64) * spec.test_fraction).round() as usize;
    let n_test = n_test.clamp(1, n.saturating_sub(1).max(1));
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Dataset {
        inputs,
        labels,
        num_classes: classes,
        train,
        test,
    })
}

fn blobs(spec: &DataSpec, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let center = Normal::new(0.0, spec.separation).unwrap();
    let noise = Normal::new(0.0, spec.noise).unwrap();
    let centers: Vec<f64> = (0..spec.classes * spec.dim).map(|_| center.sample(rng)).collect();
    let mut data = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        labels.push(c);
        for j in 0..spec.dim {
            data.push(centers[c * spec.dim + j] + noise.sample(rng));
        }
    }
    (Tensor::matrix(spec.samples, spec.dim, data).unwrap(), labels)
}

fn moons(samples: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let jitter = Normal::new(0.0, noise).unwrap();
    let mut data = Vec::with_capacity(samples * 2);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % 2;
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        data.push(x + jitter.sample(rng));
        data.push(y + jitter.sample(rng));
        labels.push(label);
    }
    (Tensor::matrix(samples, 2, data).unwrap(), labels)
}

/// Rows of pixel values in `[0, 1]` followed by an integer label. Blank
/// lines are skipped; every row must have the arity of the first.
pub fn parse_digits_csv(text: &str, classes: usize) -> Result<(Tensor, Vec<usize>), DataError> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Csv { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(err("need at least one value and a label".into()));
        }
        let w = *width.get_or_insert(fields.len());
        if fields.len() != w {
            return Err(err(format!("expected {} fields, found {}", w, fields.len())));
        }
        let (pixels, label) = fields.split_at(w - 1);
        for p in pixels {
            let v: f64 = p.parse().map_err(|_| err(format!("non-numeric value {p:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(err(format!("value {v} outside [0, 1]")));
            }
            data.push(v);
        }
        let label: usize = label[0]
            .parse()
            .map_err(|_| err(format!("label {:?} is not a non-negative integer", label[0])))?;
        if label >= classes {
            return Err(err(format!("label {label} outside [0, {classes})")));
        }
        labels.push(label);
    }
    let Some(w) = width else {
        return Err(DataError::Csv {
            line: 0,
            msg: "no rows".into(),
        });
    };
    let rows = labels.len();
    Ok((Tensor::matrix(rows, w - 1, data).unwrap(), labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_seeded_and_split() {
        let spec = DataSpec::default();
        let a = make_dataset(&spec, 5).unwrap();
        let b = make_dataset(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = make_dataset(&spec, 6).unwrap();
        assert_ne!(a.inputs, c.inputs);
        assert_eq!(a.train.len() + a.test.len(), spec.samples);
        assert_eq!(a.test.len(), 300);
        let mut all: Vec<usize> = a.train.iter().chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..spec.samples).collect::<Vec<_>>());
    }

    #[test]
    fn moons_shape() {
        let spec = DataSpec {
            kind: DatasetKind::Moons,
            samples: 100,
            noise: 0.1,
            ..DataSpec::default()
        };
        let d = make_dataset(&spec, 0).unwrap();
        assert_eq!(d.inputs.shape(), &[100, 2]);
        assert_eq!(d.num_classes, 2);
        assert_eq!(d.labels.iter().filter(|&&l| l == 1).count(), 50);
    }

    #[test]
    fn csv_parses() {
        let (x, y) = parse_digits_csv("0,0.5,1\n\n1,0.25,0\n", 2).unwrap();
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[0.0, 0.5, 1.0, 0.25]);
        assert_eq!(y, vec![1, 0]);
    }

    #[test]
    fn csv_short_row_names_line() {
        let e = parse_digits_csv("0,0.5,1\n0.1,1\n", 2).unwrap_err();
        match e {
            DataError::Csv { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("expected 3 fields"), "{msg}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn csv_rejects_non_numeric_and_bad_label() {
        assert!(matches!(
            parse_digits_csv("0,x,1\n", 2),
            Err(DataError::Csv { line: 1, .. })
        ));
        assert!(matches!(
            parse_digits_csv("0,0,5\n", 2),
            Err(DataError::Csv { line: 1, .. })
        ));
    }

    #[test]
    fn invalid_specs() {
        let s = DataSpec {
            test_fraction: 1.0,
            ..DataSpec::default()
        };
        assert!(make_dataset(&s, 0).is_err());
        let s = DataSpec {
            kind: DatasetKind::DigitsCsv,
            ..DataSpec::default()
        };
        assert!(make_dataset(&s, 0).is_err());
    }
}
