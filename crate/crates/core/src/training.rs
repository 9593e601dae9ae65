//! Two-pathway training: view generation, the optimizer and schedule, the
//! momentum queue and the epoch loop.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::channel::{ChannelError, ChannelSpec};
use crate::codes::sign_code;
use crate::config::{Augmentation, TrainConfig};
use crate::format::g6;
use crate::model::{init_model, momentum_update, EncoderModel, ModelDims, ModelError, MomentumState};
use crate::objective::{nac_loss, nac_mq_loss, simclr_loss, LossBreakdown, LossKind, ObjectiveError};
use crate::rng::{stream, streams, StreamRng};
use crate::tensor::{grad_check, GradCheckReport, Graph, NodeId, OpKind, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has {rows} rows, fewer than batch_size = {batch}")]
    TooFewRows { rows: usize, batch: usize },
    #[error("queue rows have dimension {expected}, got {got}")]
    QueueDim { expected: usize, got: usize },
    #[error("{expected} gradients expected, got {got}")]
    GradientCount { expected: usize, got: usize },
    #[error("parameter {index}: shape {param:?} vs gradient {grad:?}")]
    GradientShape { index: usize, param: Vec<usize>, grad: Vec<usize> },
    #[error("step {step}: {source}")]
    Step { step: usize, source: ObjectiveError },
    #[error("step {step}: non-finite loss {value}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("writing log: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Fixed-capacity FIFO of detached code rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumQueue {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<f64>>,
}

impl MomentumQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self { capacity, dim, rows: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends rows in order, evicting the oldest beyond capacity.
    pub fn push(&mut self, rows: &Tensor) -> Result<()> {
        if rows.rows() > 0 && rows.cols() != self.dim {
            return Err(TrainError::QueueDim { expected: self.dim, got: rows.cols() });
        }
        for i in 0..rows.rows() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(rows.row(i).to_vec());
        }
        Ok(())
    }

    /// Contents, oldest first.
    pub fn to_tensor(&self) -> Tensor {
        if self.rows.is_empty() {
            return Tensor::zeros(&[0, self.dim]);
        }
        let rows: Vec<Vec<f64>> = self.rows.iter().cloned().collect();
        Tensor::from_rows(&rows).expect("queue rows share a width")
    }
}

fn augment(x: &[f64], aug: &Augmentation, rng: &mut StreamRng) -> Vec<f64> {
    let mut v = x.to_vec();
    if v.len() == 2 && aug.rotation > 0.0 {
        let t = rng.random_range(-aug.rotation..=aug.rotation);
        let (s, c) = t.sin_cos();
        v = vec![c * v[0] - s * v[1], s * v[0] + c * v[1]];
    }
    if aug.scale > 0.0 {
        let k = rng.random_range(1.0 - aug.scale..=1.0 + aug.scale);
        v.iter_mut().for_each(|e| *e *= k);
    }
    if aug.sigma > 0.0 {
        for e in &mut v {
            let n: f64 = StandardNormal.sample(rng);
            *e += aug.sigma * n;
        }
    }
    v
}

/// Two independent random views of `x`: rotation (2-D inputs only), then
/// scale jitter, then additive Gaussian noise.
pub fn make_views(x: &[f64], aug: &Augmentation, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
    let a = augment(x, aug, rng);
    let b = augment(x, aug, rng);
    (a, b)
}

/// `[2K, d]` batch with the two views of example `k` in rows `2k`, `2k+1`.
pub fn view_batch(batch: &Tensor, aug: &Augmentation, rng: &mut StreamRng) -> Tensor {
    let mut rows = Vec::with_capacity(2 * batch.rows());
    for i in 0..batch.rows() {
        let (a, b) = make_views(batch.row(i), aug, rng);
        rows.push(a);
        rows.push(b);
    }
    Tensor::from_rows(&rows).expect("views share a width")
}

/// Linear warmup over `warmup_steps`, then cosine decay to zero at
/// `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with classical momentum; weight decay enters as `wd·θ` added to the
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub beta: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(beta: f64, weight_decay: f64) -> Self {
        Self { beta, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TrainError::GradientCount { expected: params.len(), got: grads.len() });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TrainError::GradientShape {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.beta * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Batch mean of `‖z‖²`.
    pub mean_code_norm: f64,
    /// Distinct sign codes among the batch's `2K` views.
    pub distinct_codes: usize,
}

pub const LOG_HEADER: &str = "step,lr,total,variational,subsample,l2,mean_code_norm,distinct_codes_estimate";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            g6(self.lr),
            g6(l.total),
            g6(l.variational_term),
            g6(l.subsample_term),
            g6(l.l2_penalty),
            g6(self.mean_code_norm),
            self.distinct_codes
        )
    }
}

/// Mutable training state: model, optimizer, queue and augmentation stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: EncoderModel,
    pub optimizer: Sgd,
    pub queue: Option<MomentumQueue>,
    channel: ChannelSpec,
    aug_rng: StreamRng,
    steps_taken: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        let mut model = init_model(&config.dims(input_dim), config.seed)?;
        let queue = if config.loss == LossKind::NacMq {
            model.momentum = Some(MomentumState::new(&model.net, config.momentum_decay)?);
            Some(MomentumQueue::new(config.queue_size, config.code_dim))
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            model,
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            queue,
            channel: ChannelSpec::new(config.p)?,
            aug_rng: stream(config.seed, streams::AUGMENT),
            steps_taken: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Builds `2K` views from `batch`, evaluates the configured loss and
    /// applies one update at learning rate `lr`.
    pub fn step(&mut self, batch: &Tensor, lr: f64) -> Result<StepRecord> {
        let step = self.steps_taken;
        let at = |source: ObjectiveError| TrainError::Step { step, source };
        let views = view_batch(batch, &self.config.augmentation, &mut self.aug_rng);
        let g = Graph::new();
        let net = self.model.net.bind(&g, true);
        let x = g.constant(views.clone());
        let (loss, momentum_codes) = match self.config.loss {
            LossKind::Nac => (nac_loss(&g, &net, x, &self.channel).map_err(at)?, None),
            LossKind::SimClr { temperature } => (simclr_loss(&g, &net, x, temperature).map_err(at)?, None),
            LossKind::NacMq => {
                let momentum = self.model.momentum.as_ref().expect("momentum state for nac_mq");
                let slow = momentum.net.bind(&g, false);
                let queue = self.queue.as_mut().expect("queue for nac_mq");
                if queue.is_empty() {
                    // first step: seed the bank with this batch's momentum codes
                    queue.push(&momentum.net.forward(&views)?.z)?;
                }
                let bank = queue.to_tensor();
                let mq = nac_mq_loss(&g, &net, &slow, x, &bank, &self.channel, self.config.lambda).map_err(at)?;
                (mq.graph, Some(mq.momentum_codes))
            }
        };
        let breakdown = loss.breakdown(&g);
        if !breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, value: breakdown.total });
        }
        let grads = g.backward(loss.total).map_err(|e| at(e.into()))?;
        let grads: Vec<Tensor> = net.ids.iter().map(|&id| grads.get(id)).collect();

        let z = g.value(loss.encoded.z).clone();
        let a = g.value(loss.encoded.a).clone();
        let mean_code_norm = (0..z.rows()).map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / z.rows() as f64;
        let distinct_codes = distinct_sign_rows(&a);
        drop(g);

        self.optimizer.step(self.model.net.params_mut(), &grads, lr)?;
        if let Some(codes) = momentum_codes {
            let momentum = self.model.momentum.as_mut().expect("momentum state for nac_mq");
            momentum_update(&self.model.net, momentum)?;
            self.queue.as_mut().expect("queue for nac_mq").push(&codes)?;
        }
        self.steps_taken += 1;
        Ok(StepRecord { step, lr, loss: breakdown, mean_code_norm, distinct_codes })
    }
}

/// Number of distinct sign patterns among the rows of `a`.
pub fn distinct_sign_rows(a: &Tensor) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..a.rows() {
        if let Ok(c) = sign_code(a.row(i)) {
            seen.insert(c);
        }
    }
    seen.len()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub history: Vec<StepRecord>,
}

/// Runs the configured number of epochs over `data` (rows are examples).
///
/// Each epoch visits a fresh shuffle in `⌊N/K⌋` batches; the remainder is
/// dropped. When `log` is given the CSV header is written first and the
/// epoch's rows are written and flushed at the end of each epoch.
pub fn train(data: &Tensor, config: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let k = config.batch_size;
    let n = data.rows();
    if n < k {
        return Err(TrainError::TooFewRows { rows: n, batch: k });
    }
    let mut trainer = Trainer::new(config, data.cols())?;
    let per_epoch = n / k;
    let total = per_epoch * config.epochs;
    let warmup = per_epoch * config.warmup_epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = stream(config.seed, streams::SHUFFLE);
    let mut history = Vec::with_capacity(total);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let start = history.len();
        for b in 0..per_epoch {
            let rows: Vec<Vec<f64>> = order[b * k..(b + 1) * k].iter().map(|&i| data.row(i).to_vec()).collect();
            let batch = Tensor::from_rows(&rows).expect("rows share a width");
            let lr = lr_schedule(trainer.steps_taken(), total, warmup, config.base_lr);
            history.push(trainer.step(&batch, lr)?);
        }
        if let Some(w) = log.as_deref_mut() {
            for rec in &history[start..] {
                writeln!(w, "{}", rec.csv_line())?;
            }
            w.flush()?;
        }
    }
    Ok(TrainOutcome { model: trainer.model, history })
}

/// One finite-difference check of one loss on one random model.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub loss: &'static str,
    pub model: usize,
    pub report: GradCheckReport,
}

type LossFn<'a> = dyn Fn(&Graph, &[NodeId]) -> std::result::Result<NodeId, ObjectiveError> + 'a;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Checks the gradients of all three losses with respect to every live
/// parameter on `models` small random networks (input 3, hidden [5, 4],
/// D = 3, batch of 3 pairs, queue of 9 rows) with random biases.
/// `p`, `lambda`, `temperature` and `momentum_decay` come from `config`;
/// the models are seeded from `config.seed`.
pub fn gradient_suite(config: &TrainConfig, models: usize) -> Result<Vec<GradCase>> {
    let spec = ChannelSpec::new(config.p)?;
    let tau = config.temperature();
    let lambda = config.lambda;
    let mut cases = Vec::with_capacity(3 * models);
    for k in 0..models {
        let seed = config.seed.wrapping_add(k as u64);
        let mut rng = stream(seed, streams::GRADCHECK);
        let mut m = init_model(&ModelDims::new(3, vec![5, 4], 3), seed)?;
        for p in m.net.params_mut() {
            if p.shape().len() == 1 {
                p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
        let mut gauss = |rows: usize, cols: usize| {
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
        };
        let x = gauss(6, 3);
        let queue = gauss(9, 3).map(f64::tanh);
        let mut momentum = MomentumState::new(&m.net, config.momentum_decay)?;
        for p in momentum.net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v *= 0.8);
        }
        let params: Vec<Tensor> = m.net.params().into_iter().cloned().collect();
        let run = |name: &'static str, f: &LossFn| {
            // surface configuration errors before differencing
            let g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|t| g.leaf(t.clone())).collect();
            f(&g, &ids).map_err(|source| TrainError::Step { step: 0, source })?;
            let report = grad_check(|g, ids| f(g, ids).map_err(tensor_error), &params, GRAD_STEP, GRAD_TOL)
                .map_err(|e| TrainError::Step { step: 0, source: e.into() })?;
            Ok::<_, TrainError>(GradCase { loss: name, model: k, report })
        };
        cases.push(run("nac", &|g, ids| {
            let net = m.net.bind_ids(ids.to_vec());
            nac_loss(g, &net, g.constant(x.clone()), &spec).map(|l| l.total)
        })?);
        cases.push(run("nac_mq", &|g, ids| {
            let net = m.net.bind_ids(ids.to_vec());
            let slow = momentum.net.bind(g, false);
            nac_mq_loss(g, &net, &slow, g.constant(x.clone()), &queue, &spec, lambda).map(|l| l.graph.total)
        })?);
        cases.push(run("simclr", &|g, ids| {
            let net = m.net.bind_ids(ids.to_vec());
            simclr_loss(g, &net, g.constant(x.clone()), tau).map(|l| l.total)
        })?);
    }
    Ok(cases)
}

fn tensor_error(e: ObjectiveError) -> TensorError {
    match e {
        ObjectiveError::Tensor(t) => t,
        other => TensorError::Domain { kind: OpKind::Add, detail: other.to_string() },
    }
}
