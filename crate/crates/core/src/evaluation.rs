//! Downstream protocols on a frozen encoder: a linear probe on the
//! representation `h` and Hamming retrieval with the projection sign codes.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codes::{sign_code, ActivationCode, CodeError, HashIndex, MapReport, mean_average_precision};
use crate::data::{stratified_split, DataError, Dataset};
use crate::format::g6;
use crate::model::{EncoderModel, ModelError};
use crate::rng::{stream, streams};
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("linear probe needs at least two classes, got {0}")]
    SingleClass(usize),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("learning-rate grid is empty")]
    EmptyGrid,
    #[error("{features} feature rows but {labels} labels")]
    Rows { features: usize, labels: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Frozen-encoder outputs for a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// Representation rows, `N × representation_dim`.
    pub h: Tensor,
    /// `sign(a)` of the projection output, one per row.
    pub codes: Vec<ActivationCode>,
}

pub fn extract_features(model: &EncoderModel, data: &Tensor) -> Result<Features> {
    let act = model.forward(data)?;
    let codes = (0..act.a.rows()).map(|i| sign_code(act.a.row(i))).collect::<std::result::Result<_, _>>()?;
    Ok(Features { h: act.h, codes })
}

pub fn distinct_codes(codes: &[ActivationCode]) -> usize {
    codes.iter().collect::<std::collections::BTreeSet<_>>().len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 100, lr_grid: vec![0.01, 0.1, 1.0, 10.0], train_fraction: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Held-out accuracy at the chosen learning rate.
    pub accuracy: f64,
    pub chosen_lr: f64,
    /// Held-out accuracy for every grid entry, in grid order.
    pub per_lr: Vec<(f64, f64)>,
    pub n_train: usize,
    pub n_test: usize,
}

/// Relative eigenvalue cutoff below which whitening drops a direction.
const WHITEN_CUTOFF: f64 = 1e-9;

/// Maps rows to `(x − μ)·V·Λ^{-½}` over the non-degenerate principal
/// directions of the training rows.
struct Whitener {
    mean: Vec<f64>,
    transform: DMatrix<f64>,
}

impl Whitener {
    fn fit(x: &DMatrix<f64>) -> Self {
        let (n, d) = x.shape();
        let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
        let mut centered = x.clone();
        for j in 0..d {
            centered.column_mut(j).add_scalar_mut(-mean[j]);
        }
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..d).filter(|&k| eig.eigenvalues[k] > WHITEN_CUTOFF * max && max > 0.0).collect();
        let mut transform = DMatrix::zeros(d, keep.len());
        for (c, &k) in keep.iter().enumerate() {
            let s = eig.eigenvalues[k].sqrt();
            transform.set_column(c, &(eig.eigenvectors.column(k) / s));
        }
        Self { mean, transform }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = x.clone();
        for j in 0..x.ncols() {
            centered.column_mut(j).add_scalar_mut(-self.mean[j]);
        }
        centered * &self.transform
    }
}

fn to_dmatrix(t: &Tensor, idx: &[usize]) -> DMatrix<f64> {
    let d = t.cols();
    DMatrix::from_fn(idx.len(), d, |i, j| t.row(idx[i])[j])
}

/// Softmax regression with bias, zero-initialized, full-batch gradient
/// descent on mean cross-entropy. Returns `(weights C×d, bias)`.
fn fit_softmax(x: &DMatrix<f64>, y: &[usize], classes: usize, lr: f64, epochs: usize) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut w = DMatrix::<f64>::zeros(classes, d);
    let mut b = vec![0.0; classes];
    for _ in 0..epochs {
        let logits = x * w.transpose();
        let mut resid = DMatrix::<f64>::zeros(n, classes);
        for i in 0..n {
            let row: Vec<f64> = (0..classes).map(|c| logits[(i, c)] + b[c]).collect();
            let lse = log_sum_exp(&row);
            for c in 0..classes {
                resid[(i, c)] = ((row[c] - lse).exp() - if y[i] == c { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        let grad_w = resid.transpose() * x;
        w -= grad_w * lr;
        for c in 0..classes {
            b[c] -= lr * resid.column(c).sum();
        }
    }
    (w, b)
}

fn accuracy(x: &DMatrix<f64>, y: &[usize], w: &DMatrix<f64>, b: &[f64]) -> f64 {
    let logits = x * w.transpose();
    let mut correct = 0usize;
    for (i, &label) in y.iter().enumerate() {
        let scores: Vec<f64> = (0..w.nrows()).map(|c| logits[(i, c)] + b[c]).collect();
        if scores.iter().any(|s| !s.is_finite()) {
            continue;
        }
        // first maximum wins so ties resolve to the lowest class id
        let best = (0..scores.len()).fold(0, |best, c| if scores[c] > scores[best] { c } else { best });
        correct += usize::from(best == label);
    }
    correct as f64 / y.len() as f64
}

/// Stratified split, whitening fitted on the training part, then a softmax
/// probe per grid learning rate; the best held-out accuracy wins and ties
/// go to the smaller rate.
pub fn train_linear_probe(features: &Tensor, labels: &[usize], config: &ProbeConfig) -> Result<ProbeResult> {
    if features.rows() != labels.len() {
        return Err(EvalError::Rows { features: features.rows(), labels: labels.len() });
    }
    if config.lr_grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let present = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if present < 2 {
        return Err(EvalError::SingleClass(present));
    }
    let (train_idx, test_idx) = stratified_split(labels, config.train_fraction, config.seed)?;
    if train_idx.is_empty() {
        return Err(EvalError::EmptySplit("probe training"));
    }
    if test_idx.is_empty() {
        return Err(EvalError::EmptySplit("probe test"));
    }
    let whitener = Whitener::fit(&to_dmatrix(features, &train_idx));
    let x_train = whitener.apply(&to_dmatrix(features, &train_idx));
    let x_test = whitener.apply(&to_dmatrix(features, &test_idx));
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();

    let mut grid = config.lr_grid.clone();
    grid.sort_by(f64::total_cmp);
    let mut per_lr = Vec::with_capacity(grid.len());
    for &lr in &grid {
        let (w, b) = fit_softmax(&x_train, &y_train, classes, lr, config.epochs);
        per_lr.push((lr, accuracy(&x_test, &y_test, &w, &b)));
    }
    let (chosen_lr, accuracy) = per_lr
        .iter()
        .copied()
        .fold((f64::NAN, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok(ProbeResult { accuracy, chosen_lr, per_lr, n_train: train_idx.len(), n_test: test_idx.len() })
}

/// Index built from `index` codes (ids are row numbers), queried with every
/// row of `queries`.
pub fn retrieval_map(
    index_codes: &[ActivationCode],
    index_labels: &[usize],
    query_codes: &[ActivationCode],
    query_labels: &[usize],
) -> Result<MapReport> {
    if index_codes.is_empty() {
        return Err(EvalError::EmptySplit("index"));
    }
    if query_codes.is_empty() {
        return Err(EvalError::EmptySplit("query"));
    }
    let mut index = HashIndex::new(index_codes[0].len());
    for (i, (c, &l)) in index_codes.iter().zip(index_labels).enumerate() {
        index.insert(i as u64, c.clone(), l)?;
    }
    let queries: Vec<(ActivationCode, usize)> =
        query_codes.iter().cloned().zip(query_labels.iter().copied()).collect();
    Ok(mean_average_precision(&index, &queries)?)
}

pub fn eval_retrieval(model: &EncoderModel, index: &Dataset, queries: &Dataset) -> Result<MapReport> {
    if index.is_empty() {
        return Err(EvalError::EmptySplit("index"));
    }
    if queries.is_empty() {
        return Err(EvalError::EmptySplit("query"));
    }
    let fi = extract_features(model, &index.features)?;
    let fq = extract_features(model, &queries.features)?;
    retrieval_map(&fi.codes, &index.labels, &fq.codes, &queries.labels)
}

/// mAP of uniformly random codes of length `d` for the same label layout.
pub fn random_code_map(index_labels: &[usize], query_labels: &[usize], d: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, streams::NULL_MODEL);
    let mut draw =
        |n: usize| -> Vec<ActivationCode> { (0..n).map(|_| random_code(d, &mut rng)).collect() };
    let ic = draw(index_labels.len());
    let qc = draw(query_labels.len());
    Ok(retrieval_map(&ic, index_labels, &qc, query_labels)?.map)
}

fn random_code(d: usize, rng: &mut crate::rng::StreamRng) -> ActivationCode {
    use rand::Rng;
    ActivationCode::from_bools((0..d).map(|_| rng.random::<bool>()))
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Metrics document; fields not computed by a command are `null`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub probe_accuracy: Option<f64>,
    pub chosen_lr: Option<f64>,
    pub map: Option<f64>,
    pub distinct_codes: Option<usize>,
    pub config_hash: String,
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    probe_accuracy: Option<Box<serde_json::value::RawValue>>,
    chosen_lr: Option<Box<serde_json::value::RawValue>>,
    map: Option<Box<serde_json::value::RawValue>>,
    distinct_codes: Option<usize>,
    config_hash: &'a str,
}

fn report_number(x: Option<f64>) -> Option<Box<serde_json::value::RawValue>> {
    x.filter(|v| v.is_finite())
        .map(|v| serde_json::value::RawValue::from_string(g6(v)).expect("finite numbers are valid JSON"))
}

impl Metrics {
    pub fn to_json(&self) -> String {
        let doc = MetricsDoc {
            probe_accuracy: report_number(self.probe_accuracy),
            chosen_lr: report_number(self.chosen_lr),
            map: report_number(self.map),
            distinct_codes: self.distinct_codes,
            config_hash: &self.config_hash,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
        s.push('\n');
        s
    }
}
