//! Small-instance oracles over codebooks sent through a binary symmetric
//! channel, plus the flip-probability sweep.

use rand::Rng;
use thiserror::Error;

use crate::channel::{ChannelError, ChannelSpec};
use crate::codes::{avg_hamming, ActivationCode, CodeError};
use crate::config::TrainConfig;
use crate::data::{stratified_split, synth, DataError, Dataset};
use crate::evaluation::{
    extract_features, random_code_map, retrieval_map, train_linear_probe, EvalError, ProbeConfig, ProbeResult,
};
use crate::format::g6;
use crate::model::EncoderModel;
use crate::objective::{discrete_bound_row, ObjectiveError};
use crate::tensor::{log_sum_exp, Tensor};
use crate::training::{train, TrainError};

/// Largest code length [`exact_mi`] will enumerate.
pub const MAX_ENUMERATION_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("codebook is empty")]
    EmptyBook,
    #[error("codebook needs at least {needed} codes, got {got}")]
    TooFewCodes { needed: usize, got: usize },
    #[error("code {index} has length {got}, expected {expected}")]
    Ragged { index: usize, expected: usize, got: usize },
    #[error("codes have length zero")]
    ZeroDim,
    #[error("D = {0} exceeds the enumeration limit of {MAX_ENUMERATION_DIM}; use the Monte Carlo bound instead")]
    TooLarge(usize),
    #[error("flip probability must lie in (0, 0.5), got {0}")]
    Probability(f64),
    #[error("at least 1000 samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("expected {expected} logit rows of length {dim}")]
    Logits { expected: usize, dim: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// `N` equiprobable messages of a common length `D`. Repeated codes are
/// allowed and simply share probability mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Vec<ActivationCode>,
}

impl Codebook {
    pub fn new(codes: Vec<ActivationCode>) -> Result<Self> {
        let first = codes.first().ok_or(AnalysisError::EmptyBook)?;
        let d = first.len();
        if d == 0 {
            return Err(AnalysisError::ZeroDim);
        }
        if let Some((index, c)) = codes.iter().enumerate().find(|(_, c)| c.len() != d) {
            return Err(AnalysisError::Ragged { index, expected: d, got: c.len() });
        }
        Ok(Self { codes })
    }

    /// Random book of `n` codes of length `d`.
    pub fn random<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Self> {
        let codes = (0..n)
            .map(|_| ActivationCode::from_bools((0..d).map(|_| rng.random::<bool>())))
            .collect();
        Self::new(codes)
    }

    /// Parses a code file: one bitstring per line (`1` for +1, `0` for −1),
    /// optionally after a `code` header. Lines with several comma-separated
    /// fields use the last one, so hash-index exports load directly. Blank
    /// lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut codes = Vec::new();
        let mut seen_content = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let field = line.rsplit(',').next().unwrap_or("").trim();
            if !seen_content && (field.eq_ignore_ascii_case("code") || field == "bits") {
                seen_content = true;
                continue;
            }
            seen_content = true;
            let code = ActivationCode::from_bitstring(field)
                .filter(|c| !c.is_empty())
                .ok_or_else(|| AnalysisError::Parse {
                    line: i + 1,
                    msg: format!("expected a non-empty string of 0/1, got {field:?}"),
                })?;
            codes.push(code);
        }
        Self::new(codes)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("code\n");
        for c in &self.codes {
            out.push_str(&c.to_bitstring());
            out.push('\n');
        }
        out
    }

    pub fn codes(&self) -> &[ActivationCode] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codes[0].len()
    }

    fn bank(&self) -> Tensor {
        Tensor::from_rows(&self.codes.iter().map(|c| c.as_f64()).collect::<Vec<_>>())
            .expect("codebook rows share a length")
    }
}

fn noisy_spec(spec: &ChannelSpec) -> Result<()> {
    if spec.p() <= 0.0 {
        return Err(AnalysisError::Probability(spec.p()));
    }
    Ok(())
}

/// Mutual information in nats between a uniformly chosen codeword and its
/// channel output, by enumerating all `2^D` received messages.
pub fn exact_mi(book: &Codebook, spec: &ChannelSpec) -> Result<f64> {
    noisy_spec(spec)?;
    let d = book.dim();
    if d > MAX_ENUMERATION_DIM {
        return Err(AnalysisError::TooLarge(d));
    }
    let n = book.len();
    let masks: Vec<u64> = book.codes.iter().map(|c| c.to_mask()).collect();
    let w = spec.half_scale();
    let log_norm = spec.log_normalizer(d);
    let log_n = (n as f64).ln();
    let mut log_p = vec![0.0; n];
    let mut total = 0.0;
    for m in 0..(1u64 << d) {
        for (lp, &c) in log_p.iter_mut().zip(&masks) {
            let dot = d as i64 - 2 * i64::from((m ^ c).count_ones());
            *lp = dot as f64 * w + log_norm;
        }
        let log_marginal = log_sum_exp(&log_p) - log_n;
        total += log_p.iter().map(|&lp| lp.exp() * (lp - log_marginal)).sum::<f64>();
    }
    Ok((total / n as f64).max(0.0))
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte Carlo value of the full-bank discrete bound
/// `E[ln Q(c̃ | rᵢ) − ln (1/N) Σ_k P(c̃ | c_k)]`, codewords visited in turn.
///
/// `logits` holds one row per codeword; `None` uses the channel-optimal
/// logits `rᵢ = cᵢ·ln((1−p)/p)`, at which the estimate is unbiased for
/// [`exact_mi`].
pub fn mc_mi_bound<R: Rng + ?Sized>(
    book: &Codebook,
    spec: &ChannelSpec,
    logits: Option<&[Vec<f64>]>,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    noisy_spec(spec)?;
    if samples < 1000 {
        return Err(AnalysisError::TooFewSamples(samples));
    }
    let (n, d) = (book.len(), book.dim());
    let optimal: Vec<Vec<f64>>;
    let logits = match logits {
        Some(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != d) {
                return Err(AnalysisError::Logits { expected: n, dim: d });
            }
            rows
        }
        None => {
            if n == 1 {
                return Ok(Estimate { value: 0.0, std_error: 0.0, samples });
            }
            optimal = book.codes.iter().map(|c| c.as_f64().iter().map(|b| b * spec.scale()).collect()).collect();
            &optimal
        }
    };
    let bank = book.bank();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for s in 0..samples {
        let i = s % n;
        let noisy = spec.transmit(&book.codes[i], rng).as_f64();
        let v = discrete_bound_row(&noisy, &logits[i], &bank, spec)?;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / samples as f64;
    let var = ((sum_sq - samples as f64 * mean * mean) / (samples - 1) as f64).max(0.0);
    Ok(Estimate { value: mean, std_error: (var / samples as f64).sqrt(), samples })
}

/// Both sides of `I ≤ (N−1)/N · (1−2p) · ln((1−p)/p) · d̄_H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub const BOUND_SLACK: f64 = 1e-9;

pub fn hamming_bound_rhs(book: &Codebook, spec: &ChannelSpec) -> Result<f64> {
    let n = book.len();
    if n < 2 {
        return Err(AnalysisError::TooFewCodes { needed: 2, got: n });
    }
    let d_bar = avg_hamming(book.codes())?;
    Ok((n - 1) as f64 / n as f64 * (1.0 - 2.0 * spec.p()) * spec.scale() * d_bar)
}

pub fn hamming_bound_check(book: &Codebook, spec: &ChannelSpec) -> Result<BoundCheck> {
    let rhs = hamming_bound_rhs(book, spec)?;
    let lhs = exact_mi(book, spec)?;
    Ok(BoundCheck { lhs, rhs, holds: lhs <= rhs + BOUND_SLACK })
}

/// Downstream metrics of one trained model on a labelled task.
#[derive(Debug, Clone, PartialEq)]
pub struct Downstream {
    pub probe: ProbeResult,
    pub map: f64,
    /// Number of held-out rows the probe was scored on.
    pub probe_test_rows: usize,
    pub index_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Probe on `h` over the whole dataset (with its own stratified split) and
/// retrieval with a stratified 80/20 index/query split seeded by `seed`.
pub fn downstream(model: &EncoderModel, data: &Dataset, seed: u64) -> std::result::Result<Downstream, EvalError> {
    let features = extract_features(model, &data.features)?;
    let probe = train_linear_probe(&features.h, &data.labels, &ProbeConfig { seed, ..ProbeConfig::default() })?;
    let (ix, q) = stratified_split(&data.labels, 0.8, seed)?;
    let pick = |idx: &[usize]| -> (Vec<ActivationCode>, Vec<usize>) {
        (idx.iter().map(|&i| features.codes[i].clone()).collect(), idx.iter().map(|&i| data.labels[i]).collect())
    };
    let (ic, il) = pick(&ix);
    let (qc, ql) = pick(&q);
    let map = retrieval_map(&ic, &il, &qc, &ql)?.map;
    Ok(Downstream { probe_test_rows: probe.n_test, probe, map, index_labels: il, query_labels: ql })
}

/// Interval a metric of an uninformative representation falls in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChanceBand {
    pub lo: f64,
    pub hi: f64,
}

impl ChanceBand {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// `1/C ± 3·sqrt((1/C)(1 − 1/C)/n)` for accuracy on `n` held-out rows.
pub fn accuracy_chance_band(classes: usize, n_test: usize) -> ChanceBand {
    let q = 1.0 / classes as f64;
    let half = 3.0 * (q * (1.0 - q) / n_test as f64).sqrt();
    ChanceBand { lo: q - half, hi: q + half }
}

/// Mean ± 3 sd of the mAP of `draws` independent random-code indexes with
/// the given label layout.
pub fn map_chance_band(
    index_labels: &[usize],
    query_labels: &[usize],
    d: usize,
    draws: usize,
    seed: u64,
) -> std::result::Result<ChanceBand, EvalError> {
    let maps = (0..draws as u64)
        .map(|k| random_code_map(index_labels, query_labels, d, seed.wrapping_add(k)))
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    let mean = maps.iter().sum::<f64>() / draws as f64;
    let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (draws.max(2) - 1) as f64;
    let half = 3.0 * var.sqrt();
    Ok(ChanceBand { lo: mean - half, hi: mean + half })
}

pub const NULL_DRAWS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub probe_accuracy: f64,
    pub retrieval_map: f64,
    /// Training hit a non-finite loss; metrics are NaN.
    pub diverged: bool,
    pub probe_band: ChanceBand,
    pub map_band: ChanceBand,
}

impl SweepRow {
    pub fn within_chance(&self) -> bool {
        !self.diverged && self.probe_band.contains(self.probe_accuracy) && self.map_band.contains(self.retrieval_map)
    }
}

pub const SWEEP_HEADER: &str = "p,linear_probe_accuracy,retrieval_map,status,within_chance";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            g6(r.p),
            g6(r.probe_accuracy),
            g6(r.retrieval_map),
            if r.diverged { "diverged" } else { "ok" },
            r.within_chance()
        ));
    }
    out
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("flip probability {0} outside (0, 0.5)")]
    Probability(f64),
    #[error("p list is empty")]
    Empty,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Trains one model per flip probability on the configured synthetic task
/// and scores both downstream metrics. Runs whose loss turns non-finite
/// are reported as diverged and the sweep moves on.
pub fn flip_sweep(config: &TrainConfig, p_list: &[f64]) -> std::result::Result<Vec<SweepRow>, SweepError> {
    if p_list.is_empty() {
        return Err(SweepError::Empty);
    }
    if let Some(&p) = p_list.iter().find(|&&p| !(p > 0.0 && p < 0.5)) {
        return Err(SweepError::Probability(p));
    }
    let t = &config.task;
    let data = synth(t.kind, t.n, t.noise, t.classes, t.seed)?;
    let mut rows = Vec::with_capacity(p_list.len());
    for &p in p_list {
        let cfg = TrainConfig { p, ..config.clone() };
        let (ix, q) = stratified_split(&data.labels, 0.8, t.seed)?;
        let index_labels: Vec<usize> = ix.iter().map(|&i| data.labels[i]).collect();
        let query_labels: Vec<usize> = q.iter().map(|&i| data.labels[i]).collect();
        let map_band = map_chance_band(&index_labels, &query_labels, cfg.code_dim, NULL_DRAWS, t.seed)?;
        let n_test = stratified_split(&data.labels, ProbeConfig::default().train_fraction, t.seed)?.1.len();
        let probe_band = accuracy_chance_band(t.classes, n_test);
        let row = match train(&data.features, &cfg, None) {
            Ok(out) => {
                let d = downstream(&out.model, &data, t.seed)?;
                SweepRow { p, probe_accuracy: d.probe.accuracy, retrieval_map: d.map, diverged: false, probe_band, map_band }
            }
            Err(TrainError::NonFiniteLoss { .. }) | Err(TrainError::Step { .. }) => SweepRow {
                p,
                probe_accuracy: f64::NAN,
                retrieval_map: f64::NAN,
                diverged: true,
                probe_band,
                map_band,
            },
            Err(e) => return Err(e.into()),
        };
        rows.push(row);
    }
    Ok(rows)
}
