//! ReLU encoder with a projection head (code preactivation `a`, relaxed
//! code `z = tanh(a)`) and an inference head (Bernoulli logits `r`).
//!
//! Parameters live in a [`Network`]. Training binds a network onto a
//! [`Graph`] with [`Network::bind`]; evaluation uses the tape-free
//! [`Network::forward`].

use rand_distr::{Distribution, Normal};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::rng::{self, streams};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer width must be at least 1 (got {0:?})")]
    Width(Vec<usize>),
    #[error("input has {got} columns, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("momentum state does not mirror the live model")]
    MomentumShape,
    #[error("momentum decay {0} outside [0, 1)")]
    Decay(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    /// Encoder widths; the last one is the representation size.
    pub hidden: Vec<usize>,
    pub code_dim: usize,
    pub head_hidden: usize,
}

impl ModelDims {
    pub fn new(input: usize, hidden: Vec<usize>, code_dim: usize) -> Self {
        let head_hidden = hidden.last().copied().unwrap_or(input);
        Self {
            input,
            hidden,
            code_dim,
            head_hidden,
        }
    }

    pub fn representation(&self) -> usize {
        *self.hidden.last().expect("validated dims")
    }

    fn validate(&self) -> Result<()> {
        let mut all = vec![self.input];
        all.extend(&self.hidden);
        all.extend([self.head_hidden, self.code_dim]);
        if self.hidden.is_empty() || all.contains(&0) {
            return Err(ModelError::Width(all));
        }
        Ok(())
    }
}

/// Affine layer `x ↦ x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// He-normal weights (std `√(2/fan_in)`), zero bias.
    pub fn he_normal(input: usize, output: usize, rng: &mut rng::StreamRng) -> Self {
        let normal = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("positive std");
        let data = (0..input * output).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::matrix(output, input, data),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight, true)?;
        let m = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.bias.data()[i % m];
        }
        Ok(y)
    }
}

/// One hidden ReLU layer followed by a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Dense,
    pub output: Dense,
}

impl Head {
    fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Dense::zeros(input, hidden),
            output: Dense::zeros(hidden, output),
        }
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: Vec<Dense>,
    pub projection: Head,
    pub inference: Head,
}

/// Tape-free forward pass outputs for a batch.
#[derive(Debug, Clone)]
pub struct Activations {
    /// Preactivation of every encoder layer.
    pub encoder_pre: Vec<Tensor>,
    pub h: Tensor,
    pub projection_pre: Tensor,
    pub a: Tensor,
    pub z: Tensor,
    pub r: Tensor,
}

impl Network {
    pub fn zeros(dims: &ModelDims) -> Self {
        let mut encoder = Vec::with_capacity(dims.hidden.len());
        let mut prev = dims.input;
        for &w in &dims.hidden {
            encoder.push(Dense::zeros(prev, w));
            prev = w;
        }
        Self {
            encoder,
            projection: Head::zeros(prev, dims.head_hidden, dims.code_dim),
            inference: Head::zeros(prev, dims.head_hidden, dims.code_dim),
        }
    }

    fn layers(&self) -> Vec<&Dense> {
        let mut out: Vec<&Dense> = self.encoder.iter().collect();
        out.extend([
            &self.projection.hidden,
            &self.projection.output,
            &self.inference.hidden,
            &self.inference.output,
        ]);
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.encoder.iter_mut().collect();
        out.extend([
            &mut self.projection.hidden,
            &mut self.projection.output,
            &mut self.inference.hidden,
            &mut self.inference.output,
        ]);
        out
    }

    /// Parameters in a fixed order: each layer's weight then bias.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers()
            .into_iter()
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn same_shape(&self, other: &Network) -> bool {
        let (a, b) = (self.params(), other.params());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].input_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.projection.output.output_dim()
    }

    pub fn representation_dim(&self) -> usize {
        self.encoder.last().expect("non-empty encoder").output_dim()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(ModelError::InputDim {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Activations> {
        self.check_input(x.cols())?;
        let relu = |t: &Tensor| t.map(|v| v.max(0.0));
        let mut encoder_pre = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for layer in &self.encoder {
            let pre = layer.apply(&h)?;
            h = relu(&pre);
            encoder_pre.push(pre);
        }
        let projection_pre = self.projection.hidden.apply(&h)?;
        let a = self.projection.output.apply(&relu(&projection_pre))?;
        let z = a.map(f64::tanh);
        let r = self
            .inference
            .output
            .apply(&relu(&self.inference.hidden.apply(&h)?))?;
        Ok(Activations {
            encoder_pre,
            h,
            projection_pre,
            a,
            z,
            r,
        })
    }

    /// Records every parameter on `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundNetwork {
        let ids = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        BoundNetwork {
            ids,
            encoder_layers: self.encoder.len(),
            input_dim: self.input_dim(),
        }
    }

    /// Binds already-recorded parameter nodes, in [`Network::params`] order.
    pub fn bind_ids(&self, ids: Vec<NodeId>) -> BoundNetwork {
        assert_eq!(ids.len(), self.params().len(), "parameter count mismatch");
        BoundNetwork {
            ids,
            encoder_layers: self.encoder.len(),
            input_dim: self.input_dim(),
        }
    }
}

/// Encoder outputs on a graph.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub h: NodeId,
    pub a: NodeId,
    pub z: NodeId,
}

/// Graph node ids for a network's parameters, in [`Network::params`] order.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    pub ids: Vec<NodeId>,
    encoder_layers: usize,
    input_dim: usize,
}

impl BoundNetwork {
    fn dense(&self, g: &Graph, layer: usize, x: NodeId) -> Result<NodeId> {
        let xw = g.matmul_t(x, self.ids[2 * layer])?;
        Ok(g.add(xw, self.ids[2 * layer + 1])?)
    }

    pub fn encode(&self, g: &Graph, x: NodeId) -> Result<Encoded> {
        let cols = g.value(x).cols();
        if cols != self.input_dim {
            return Err(ModelError::InputDim {
                expected: self.input_dim,
                got: cols,
            });
        }
        let mut h = x;
        for l in 0..self.encoder_layers {
            let pre = self.dense(g, l, h)?;
            h = g.relu(pre)?;
        }
        let p = self.encoder_layers;
        let hidden = self.dense(g, p, h)?;
        let hidden = g.relu(hidden)?;
        let a = self.dense(g, p + 1, hidden)?;
        let z = g.tanh(a)?;
        Ok(Encoded { h, a, z })
    }

    pub fn infer_logits(&self, g: &Graph, h: NodeId) -> Result<NodeId> {
        let p = self.encoder_layers + 2;
        let hidden = self.dense(g, p, h)?;
        let hidden = g.relu(hidden)?;
        self.dense(g, p + 1, hidden)
    }
}

/// Exponential moving average copy of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub decay: f64,
    pub net: Network,
}

impl MomentumState {
    pub fn new(live: &Network, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(ModelError::Decay(decay));
        }
        Ok(Self {
            decay,
            net: live.clone(),
        })
    }
}

/// `θ̂ ← m·θ̂ + (1−m)·θ` for every parameter.
pub fn momentum_update(live: &Network, momentum: &mut MomentumState) -> Result<()> {
    if !live.same_shape(&momentum.net) {
        return Err(ModelError::MomentumShape);
    }
    let m = momentum.decay;
    for (slow, fast) in momentum.net.params_mut().into_iter().zip(live.params()) {
        for (s, f) in slow.data_mut().iter_mut().zip(fast.data()) {
            *s = m * *s + (1.0 - m) * f;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub dims: ModelDims,
    pub seed: u64,
    pub net: Network,
    pub momentum: Option<MomentumState>,
}

/// He-normal initialization, zero biases, deterministic in `seed`.
pub fn init_model(dims: &ModelDims, seed: u64) -> Result<EncoderModel> {
    dims.validate()?;
    let mut rng = rng::stream(seed, streams::INIT);
    let mut net = Network::zeros(dims);
    for layer in net.layers_mut() {
        *layer = Dense::he_normal(layer.input_dim(), layer.output_dim(), &mut rng);
    }
    Ok(EncoderModel {
        dims: dims.clone(),
        seed,
        net,
        momentum: None,
    })
}

impl EncoderModel {
    pub fn forward(&self, x: &Tensor) -> Result<Activations> {
        self.net.forward(x)
    }

    pub fn to_json(&self) -> String {
        let doc = CheckpointDoc {
            dims: self.dims.clone(),
            seed: self.seed,
            layers: self.net.encoder.iter().map(DenseDoc::from).collect(),
            projection: HeadDoc::from(&self.net.projection),
            inference: HeadDoc::from(&self.net.inference),
            momentum: self.momentum.as_ref().map(|m| MomentumDoc {
                decay: F17(m.decay),
                layers: m.net.encoder.iter().map(DenseDoc::from).collect(),
                projection: HeadDoc::from(&m.net.projection),
                inference: HeadDoc::from(&m.net.inference),
            }),
        };
        let mut s = serde_json::to_string(&doc).expect("checkpoint serialization");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        doc.dims
            .validate()
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let net = network_from_docs(&doc.layers, &doc.projection, &doc.inference)?;
        let expected = Network::zeros(&doc.dims);
        if !net.same_shape(&expected) {
            return Err(ModelError::Checkpoint(
                "layer shapes do not match dims".into(),
            ));
        }
        let momentum = match doc.momentum {
            None => None,
            Some(m) => {
                let mnet = network_from_docs(&m.layers, &m.projection, &m.inference)?;
                if !mnet.same_shape(&net) {
                    return Err(ModelError::Checkpoint(
                        "momentum shapes do not mirror the model".into(),
                    ));
                }
                Some(
                    MomentumState::new(&mnet, m.decay.0)
                        .map_err(|e| ModelError::Checkpoint(e.to_string()))?,
                )
            }
        };
        Ok(Self {
            dims: doc.dims,
            seed: doc.seed,
            net,
            momentum,
        })
    }
}

/// `f64` written with 17 significant digits.
#[derive(Debug, Clone, Copy)]
struct F17(f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(crate::format::f17(self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for F17 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !v.is_finite() {
            return Err(D::Error::custom("non-finite parameter"));
        }
        Ok(F17(v))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseDoc {
    w: Vec<Vec<F17>>,
    b: Vec<F17>,
}

impl From<&Dense> for DenseDoc {
    fn from(d: &Dense) -> Self {
        Self {
            w: d
                .weight
                .to_rows()
                .into_iter()
                .map(|r| r.into_iter().map(F17).collect())
                .collect(),
            b: d.bias.data().iter().copied().map(F17).collect(),
        }
    }
}

impl DenseDoc {
    fn to_dense(&self) -> Result<Dense> {
        let rows: Vec<Vec<f64>> = self
            .w
            .iter()
            .map(|r| r.iter().map(|v| v.0).collect())
            .collect();
        let weight = Tensor::from_rows(&rows).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if weight.rows() != self.b.len() || weight.cols() == 0 {
            return Err(ModelError::Checkpoint(format!(
                "weight {}x{} does not match bias of length {}",
                weight.rows(),
                weight.cols(),
                self.b.len()
            )));
        }
        Ok(Dense {
            weight,
            bias: Tensor::vector(self.b.iter().map(|v| v.0).collect()),
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadDoc {
    hidden: DenseDoc,
    output: DenseDoc,
}

impl From<&Head> for HeadDoc {
    fn from(h: &Head) -> Self {
        Self {
            hidden: DenseDoc::from(&h.hidden),
            output: DenseDoc::from(&h.output),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentumDoc {
    decay: F17,
    layers: Vec<DenseDoc>,
    projection: HeadDoc,
    inference: HeadDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    dims: ModelDims,
    seed: u64,
    layers: Vec<DenseDoc>,
    projection: HeadDoc,
    inference: HeadDoc,
    momentum: Option<MomentumDoc>,
}

fn network_from_docs(layers: &[DenseDoc], projection: &HeadDoc, inference: &HeadDoc) -> Result<Network> {
    let encoder = layers.iter().map(DenseDoc::to_dense).collect::<Result<Vec<_>>>()?;
    if encoder.is_empty() {
        return Err(ModelError::Checkpoint("encoder has no layers".into()));
    }
    let head = |h: &HeadDoc| -> Result<Head> {
        Ok(Head {
            hidden: h.hidden.to_dense()?,
            output: h.output.to_dense()?,
        })
    };
    Ok(Network {
        encoder,
        projection: head(projection)?,
        inference: head(inference)?,
    })
}
