//! Training objectives.
//!
//! Every loss is the negated objective, so optimizers minimize. The relaxed
//! activation-coding objective for one row `i` is
//!
//! ```text
//! ½[z̃ᵢ·rᵢ − Σ_d (softplus(r_id) + softplus(−r_id))] − ln (1/B) Σ_k exp(½L · z̃ᵢ·z_k)
//! ```
//!
//! with `L = ln((1−p)/p)`, logits `rᵢ` predicted from the *other* view of
//! the same example, and a bank of `B` codes (the `2K` in-batch codes, or a
//! momentum queue of size `M`).
//!
//! Graph builders live next to tape-free `*_value` functions that compute
//! the same quantities on plain rows; the latter are used by the analysis
//! oracles and to cross-check the former.

use thiserror::Error;

use crate::channel::ChannelSpec;
use crate::model::{BoundNetwork, Encoded, ModelError};
use crate::tensor::{dot, log_sum_exp, softplus, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch must hold an even number of rows (pairs of views), got {0}")]
    OddBatch(usize),
    #[error("code bank is empty")]
    EmptyBank,
    #[error("flip probability must lie in (0, 0.5), got {0}")]
    Probability(f64),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("row {0} has zero norm and cannot be normalized")]
    ZeroNorm(usize),
    #[error("penalty weight must be non-negative, got {0}")]
    Penalty(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Nac,
    NacMq,
    SimClr { temperature: f64 },
}

/// Scalar values of a loss and its parts.
///
/// `variational_term` and `subsample_term` are objective terms (larger is
/// better). `total = −(variational_term + subsample_term) + λ·l2_penalty`
/// for the coding losses; for the contrastive baseline only `total` is set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub variational_term: f64,
    pub subsample_term: f64,
    pub l2_penalty: f64,
}

/// `ln(σ(r)(1−σ(r)))` without forming the sigmoid.
fn log_bernoulli_normalizer(r: f64) -> f64 {
    -softplus(r) - softplus(-r)
}

/// `ln Q(z̃ | r)` for one row: `½[z̃·r + Σ ln σ(r)(1−σ(r))]`.
pub fn variational_row(z: &[f64], r: &[f64]) -> f64 {
    0.5 * (dot(z, r) + r.iter().map(|&v| log_bernoulli_normalizer(v)).sum::<f64>())
}

/// Batch mean of [`variational_row`].
pub fn variational_term_value(z: &Tensor, r: &Tensor) -> Result<f64> {
    if z.shape() != r.shape() || z.rows() == 0 {
        return Err(ObjectiveError::Shape(format!("codes {:?} vs logits {:?}", z.shape(), r.shape())));
    }
    Ok((0..z.rows()).map(|i| variational_row(z.row(i), r.row(i))).sum::<f64>() / z.rows() as f64)
}

fn check_p(spec: &ChannelSpec) -> Result<()> {
    if spec.p() <= 0.0 {
        return Err(ObjectiveError::Probability(spec.p()));
    }
    Ok(())
}

/// `−ln (1/B) Σ_k exp(½L · z̃·z_k)` over the rows of `bank`.
pub fn subsample_term_value(z: &[f64], bank: &Tensor, spec: &ChannelSpec) -> Result<f64> {
    check_p(spec)?;
    if bank.rows() == 0 || bank.is_empty() {
        return Err(ObjectiveError::EmptyBank);
    }
    if bank.cols() != z.len() {
        return Err(ObjectiveError::Shape(format!("code of length {} vs bank {:?}", z.len(), bank.shape())));
    }
    let w = spec.half_scale();
    let logits: Vec<f64> = (0..bank.rows()).map(|k| w * dot(z, bank.row(k))).collect();
    Ok(-(log_sum_exp(&logits) - (bank.rows() as f64).ln()))
}

/// One-sample value of the discrete bound
/// `ln Q(c̃ | r) − ln (1/B) Σ_k P(c̃ | c_k)`.
///
/// This is the relaxed row objective plus the channel constant
/// `−(D/2)·ln(p(1−p))` that the relaxed form leaves out of the bank term.
pub fn discrete_bound_row(noisy: &[f64], logits: &[f64], bank: &Tensor, spec: &ChannelSpec) -> Result<f64> {
    Ok(variational_row(noisy, logits) + subsample_term_value(noisy, bank, spec)?
        - spec.log_normalizer(noisy.len()))
}

/// Graph form of [`variational_term_value`]; returns a scalar node.
pub fn variational_term(g: &Graph, z: NodeId, r: NodeId) -> Result<NodeId> {
    let (zs, rs) = (g.shape(z), g.shape(r));
    if zs != rs || zs.len() != 2 {
        return Err(ObjectiveError::Shape(format!("codes {zs:?} vs logits {rs:?}")));
    }
    let zr = g.row_dot(z, r)?;
    let sp = g.softplus(r)?;
    let neg_r = g.neg(r)?;
    let sn = g.softplus(neg_r)?;
    let norm = g.add(sp, sn)?;
    let norm = g.sum_axis(norm, 1)?;
    let rows = g.sub(zr, norm)?;
    let rows = g.scale(rows, 0.5)?;
    Ok(g.mean(rows)?)
}

/// Mean over the rows of `queries` of the bank term; returns a scalar node.
pub fn subsample_term(g: &Graph, queries: NodeId, bank: NodeId, spec: &ChannelSpec) -> Result<NodeId> {
    check_p(spec)?;
    let (qs, bs) = (g.shape(queries), g.shape(bank));
    if bs.len() != 2 || bs[0] == 0 {
        return Err(ObjectiveError::EmptyBank);
    }
    if qs.len() != 2 || qs[1] != bs[1] {
        return Err(ObjectiveError::Shape(format!("queries {qs:?} vs bank {bs:?}")));
    }
    let sims = g.matmul_t(queries, bank)?;
    let sims = g.scale(sims, spec.half_scale())?;
    let lse = g.logsumexp(sims, 1)?;
    let mean_lse = g.mean(lse)?;
    let neg = g.neg(mean_lse)?;
    // −mean(lse) + ln B
    let log_b = g.constant(Tensor::scalar((bs[0] as f64).ln()));
    Ok(g.add(neg, log_b)?)
}

/// `[n, n]` matrix swapping rows `2k` and `2k+1`.
fn pair_swap(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + (i ^ 1)] = 1.0;
    }
    Tensor::matrix(n, n, data)
}

fn pair_count(g: &Graph, views: NodeId) -> Result<usize> {
    let rows = g.value(views).rows();
    if !rows.is_multiple_of(2) || rows == 0 {
        return Err(ObjectiveError::OddBatch(rows));
    }
    Ok(rows / 2)
}

/// Nodes of a recorded loss.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub total: NodeId,
    pub variational: Option<NodeId>,
    pub subsample: Option<NodeId>,
    pub l2: Option<NodeId>,
    pub encoded: Encoded,
}

impl LossGraph {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let val = |id: Option<NodeId>| id.map_or(0.0, |n| g.value(n).item());
        LossBreakdown {
            total: g.value(self.total).item(),
            variational_term: val(self.variational),
            subsample_term: val(self.subsample),
            l2_penalty: val(self.l2),
        }
    }
}

/// Relaxed coding loss over `views`, `2K` rows where rows `2k` and `2k+1`
/// are two views of one example. The bank is the `2K` in-batch codes,
/// including each row's own code.
pub fn nac_loss(g: &Graph, net: &BoundNetwork, views: NodeId, spec: &ChannelSpec) -> Result<LossGraph> {
    let k = pair_count(g, views)?;
    let enc = net.encode(g, views)?;
    let r = net.infer_logits(g, enc.h)?;
    let swap = g.constant(pair_swap(2 * k));
    let r_other = g.matmul(swap, r)?;
    let variational = variational_term(g, enc.z, r_other)?;
    let subsample = subsample_term(g, enc.z, enc.z, spec)?;
    let objective = g.add(variational, subsample)?;
    let total = g.neg(objective)?;
    Ok(LossGraph {
        total,
        variational: Some(variational),
        subsample: Some(subsample),
        l2: None,
        encoded: enc,
    })
}

/// Momentum-queue variant: logits come from the momentum network's other
/// view, the bank is `queue`, and `λ·mean‖z‖²` is added. The momentum
/// network must be bound as constants.
pub struct MqLoss {
    pub graph: LossGraph,
    /// Momentum-pathway codes for the batch, to be pushed onto the queue.
    pub momentum_codes: Tensor,
}

pub fn nac_mq_loss(
    g: &Graph,
    net: &BoundNetwork,
    momentum: &BoundNetwork,
    views: NodeId,
    queue: &Tensor,
    spec: &ChannelSpec,
    lambda: f64,
) -> Result<MqLoss> {
    if lambda < 0.0 {
        return Err(ObjectiveError::Penalty(lambda));
    }
    if queue.rows() == 0 || queue.is_empty() {
        return Err(ObjectiveError::EmptyBank);
    }
    let k = pair_count(g, views)?;
    let enc = net.encode(g, views)?;
    let slow = momentum.encode(g, views)?;
    let slow_r = momentum.infer_logits(g, slow.h)?;
    let momentum_codes = g.value(slow.z).clone();
    let swap = g.constant(pair_swap(2 * k));
    let r_other = g.matmul(swap, slow_r)?;
    let r_other = g.detach(r_other);
    let variational = variational_term(g, enc.z, r_other)?;
    let bank = g.constant(queue.clone());
    let subsample = subsample_term(g, enc.z, bank, spec)?;
    let norms = g.l2_norm_sq(enc.z)?;
    let l2 = g.mean(norms)?;
    let objective = g.add(variational, subsample)?;
    let neg = g.neg(objective)?;
    let penalty = g.scale(l2, lambda)?;
    let total = g.add(neg, penalty)?;
    Ok(MqLoss {
        graph: LossGraph {
            total,
            variational: Some(variational),
            subsample: Some(subsample),
            l2: Some(l2),
            encoded: enc,
        },
        momentum_codes,
    })
}

/// Normalized-temperature cross entropy on `u = z/‖z‖`, averaged over all
/// `2K` anchors. Each anchor's denominator holds every other row.
pub fn simclr_loss(g: &Graph, net: &BoundNetwork, views: NodeId, temperature: f64) -> Result<LossGraph> {
    if !(temperature > 0.0) {
        return Err(ObjectiveError::Temperature(temperature));
    }
    let k = pair_count(g, views)?;
    let n = 2 * k;
    let enc = net.encode(g, views)?;
    let norms = g.l2_norm_sq(enc.z)?;
    if let Some(i) = g.value(norms).data().iter().position(|&v| v == 0.0) {
        return Err(ObjectiveError::ZeroNorm(i));
    }
    let inv = g.pow(norms, -0.5)?;
    let u = g.scale_rows(enc.z, inv)?;
    let sims = g.matmul_t(u, u)?;
    let logits = g.scale(sims, 1.0 / temperature)?;
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        mask[i * n + i] = -1e30;
    }
    let mask = g.constant(Tensor::matrix(n, n, mask));
    let masked = g.add(logits, mask)?;
    let denom = g.logsumexp(masked, 1)?;
    let positives = g.constant(pair_swap(n));
    let pos = g.mul(logits, positives)?;
    let pos = g.sum_axis(pos, 1)?;
    let rows = g.sub(denom, pos)?;
    let total = g.mean(rows)?;
    Ok(LossGraph {
        total,
        variational: None,
        subsample: None,
        l2: None,
        encoded: enc,
    })
}
