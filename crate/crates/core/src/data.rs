//! Labelled toy datasets: generators, CSV storage and stratified splits.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::format::f17;
use crate::rng::{stream, streams};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset kind {0:?} (expected moons, blobs or rings)")]
    UnknownKind(String),
    #[error("need n >= 8 * classes = {needed}, got n = {got}")]
    TooFew { needed: usize, got: usize },
    #[error("{kind} requires {expected} classes, got {got}")]
    Classes { kind: Kind, expected: String, got: usize },
    #[error("noise must be finite and non-negative, got {0}")]
    Noise(f64),
    #[error("empty file")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("dataset has no rows")]
    NoRows,
    #[error("train fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Moons,
    Blobs,
    Rings,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Moons => "moons",
            Kind::Blobs => "blobs",
            Kind::Rings => "rings",
        })
    }
}

impl FromStr for Kind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(Kind::Moons),
            "blobs" => Ok(Kind::Blobs),
            "rings" => Ok(Kind::Rings),
            other => Err(DataError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Radius of the circle that blob centers sit on.
pub const BLOB_RADIUS: f64 = 1.5;

/// Draws `n` points, labels assigned round-robin so classes are balanced.
///
/// * moons: two interleaved half circles (unit radius), Gaussian noise.
/// * blobs: isotropic Gaussians of std `noise` around `classes` centers
///   evenly spaced on a circle of radius [`BLOB_RADIUS`].
/// * rings: concentric circles of radius `1 + c`, radial noise `noise`.
pub fn synth(kind: Kind, n: usize, noise: f64, classes: usize, seed: u64) -> Result<Dataset> {
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(DataError::Noise(noise));
    }
    if kind == Kind::Moons && classes != 2 {
        return Err(DataError::Classes { kind, expected: "exactly 2".into(), got: classes });
    }
    if classes < 2 {
        return Err(DataError::Classes { kind, expected: "at least 2".into(), got: classes });
    }
    if n < 8 * classes {
        return Err(DataError::TooFew { needed: 8 * classes, got: n });
    }
    let mut rng = stream(seed, streams::DATASET);
    let gauss = Normal::new(0.0, noise).expect("finite non-negative std");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let (x, y) = match kind {
            Kind::Moons => {
                let t = rng.random_range(0.0..PI);
                let (x, y) = if c == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                (x + gauss.sample(&mut rng), y + gauss.sample(&mut rng))
            }
            Kind::Blobs => {
                let angle = 2.0 * PI * c as f64 / classes as f64;
                (
                    BLOB_RADIUS * angle.cos() + gauss.sample(&mut rng),
                    BLOB_RADIUS * angle.sin() + gauss.sample(&mut rng),
                )
            }
            Kind::Rings => {
                let t = rng.random_range(0.0..2.0 * PI);
                let radius = 1.0 + c as f64 + gauss.sample(&mut rng);
                (radius * t.cos(), radius * t.sin())
            }
        };
        data.push(x);
        data.push(y);
        labels.push(c);
    }
    Ok(Dataset { name: kind.to_string(), features: Tensor::matrix(n, 2, data), labels })
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<usize>) -> Self {
        assert_eq!(features.rows(), labels.len(), "row count mismatch");
        Self { name: name.into(), features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.features.row(i).to_vec()).collect();
        let features = if rows.is_empty() {
            Tensor::zeros(&[0, self.dim()])
        } else {
            Tensor::from_rows(&rows).expect("rows share a width")
        };
        Dataset { name: self.name.clone(), features, labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    /// `f0,...,f{d-1},label` header, then one row per example.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out: String = (0..d).map(|j| format!("f{j},")).collect();
        out.push_str("label\n");
        for (i, label) in self.labels.iter().enumerate() {
            for v in self.features.row(i) {
                out.push_str(&f17(*v));
                out.push(',');
            }
            out.push_str(&label.to_string());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(name: &str, text: &str) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut records = reader.records();
        let header = match records.next() {
            None => return Err(DataError::Empty),
            Some(r) => r.map_err(|e| csv_error(e, 1))?,
        };
        let width = header.len();
        let header_ok = width >= 2
            && header.iter().take(width - 1).enumerate().all(|(j, h)| h == format!("f{j}"))
            && &header[width - 1] == "label";
        if !header_ok {
            return Err(DataError::Parse { line: 1, msg: "expected header f0,...,f{d-1},label".into() });
        }
        let d = width - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in records {
            let rec = rec.map_err(|e| csv_error(e, 0))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != width {
                return Err(DataError::Parse {
                    line,
                    msg: format!("expected {width} fields, found {}", rec.len()),
                });
            }
            for cell in rec.iter().take(d) {
                let v: f64 = cell.trim().parse().map_err(|_| DataError::Parse {
                    line,
                    msg: format!("non-numeric cell {cell:?}"),
                })?;
                if !v.is_finite() {
                    return Err(DataError::Parse { line, msg: format!("non-finite value {cell:?}") });
                }
                data.push(v);
            }
            let cell = &rec[d];
            let label: usize = cell.trim().parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("label must be a non-negative integer, got {cell:?}"),
            })?;
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(DataError::NoRows);
        }
        Ok(Dataset { name: name.to_string(), features: Tensor::matrix(labels.len(), d, data), labels })
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        Self::parse_csv(&name, &text)
    }
}

fn csv_error(e: csv::Error, fallback_line: u64) -> DataError {
    let line = e.position().map_or(fallback_line, |p| p.line());
    DataError::Parse { line, msg: e.to_string() }
}

/// Splits indices per class, `train_fraction` of each class (rounded, at
/// least one on each side when the class has two or more rows) going to
/// the first part. Both parts are returned in ascending order.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Fraction(train_fraction));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = stream(seed, streams::SPLIT);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let mut k = (train_fraction * n as f64).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        }
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
