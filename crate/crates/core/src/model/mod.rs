//! Gated-attention MIL classifier: instance embedder, attention pooling
//! and a two-logit linear head.
//!
//! For a bag with instance embeddings `h_1..h_n` the attention score of
//! instance `i` is `wᵀ(tanh(V h_i) ⊙ sigmoid(U h_i))`; the weights `a` are
//! the softmax of the scores over the bag, the pooled representation is
//! `h = Σ a_i h_i` and the logits are `W_c h + b`.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tape, Tensor, Var};

pub use checkpoint::{read_checkpoint_header, CheckpointHeader, CHECKPOINT_VERSION};

fn default_conv1() -> usize {
    20
}
fn default_conv2() -> usize {
    50
}
fn default_kernel() -> usize {
    5
}
fn default_embed() -> usize {
    500
}
fn default_attention_dim() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    /// Two conv/relu/maxpool blocks and a linear+relu layer on 1×28×28 images.
    Conv28 {
        #[serde(default = "default_conv1")]
        conv1_channels: usize,
        #[serde(default = "default_conv2")]
        conv2_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_embed")]
        embed_dim: usize,
    },
    /// Linear+relu stack on vector instances.
    Mlp {
        input_dim: usize,
        #[serde(default)]
        hidden: Vec<usize>,
        output_dim: usize,
    },
    /// Instances are used as embeddings directly.
    Identity { dim: usize },
}

impl EmbedderConfig {
    pub fn conv28() -> Self {
        EmbedderConfig::Conv28 {
            conv1_channels: default_conv1(),
            conv2_channels: default_conv2(),
            kernel: default_kernel(),
            embed_dim: default_embed(),
        }
    }

    /// Embedding width `M`.
    pub fn embed_dim(&self) -> usize {
        match self {
            EmbedderConfig::Conv28 { embed_dim, .. } => *embed_dim,
            EmbedderConfig::Mlp { output_dim, .. } => *output_dim,
            EmbedderConfig::Identity { dim } => *dim,
        }
    }

    /// Shape of one raw instance accepted by the embedder.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            EmbedderConfig::Conv28 { .. } => vec![1, 28, 28],
            EmbedderConfig::Mlp { input_dim, .. } => vec![*input_dim],
            EmbedderConfig::Identity { dim } => vec![*dim],
        }
    }

    /// Side length after both conv/pool blocks.
    fn conv28_side(kernel: usize) -> Option<usize> {
        let s = 28usize.checked_sub(kernel)? + 1;
        let s = (s / 2).checked_sub(kernel)? + 1;
        Some(s / 2).filter(|&s| s > 0)
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            EmbedderConfig::Conv28 {
                conv1_channels,
                conv2_channels,
                kernel,
                embed_dim,
            } => {
                *conv1_channels > 0
                    && *conv2_channels > 0
                    && *embed_dim > 0
                    && *kernel > 0
                    && Self::conv28_side(*kernel).is_some()
            }
            EmbedderConfig::Mlp {
                input_dim,
                hidden,
                output_dim,
            } => *input_dim > 0 && *output_dim > 0 && hidden.iter().all(|&h| h > 0),
            EmbedderConfig::Identity { dim } => *dim > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid embedder configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embedder: EmbedderConfig,
    #[serde(default = "default_attention_dim")]
    pub attention_dim: usize,
    /// Keep embedder parameters fixed during training.
    #[serde(default)]
    pub freeze_embedder: bool,
}

impl ModelConfig {
    pub fn new(embedder: EmbedderConfig, attention_dim: usize) -> Self {
        Self {
            embedder,
            attention_dim,
            freeze_embedder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        if self.attention_dim == 0 {
            return Err(Error::Config("attention_dim must be positive".into()));
        }
        Ok(())
    }

    /// Expected `(name, shape, fan_in)` of every parameter, in storage order.
    /// A fan-in of zero marks a bias (initialised to zero).
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let linear = |name: &str, outs: usize, ins: usize, out: &mut Vec<_>| {
            out.push((format!("{name}.weight"), vec![outs, ins], ins));
            out.push((format!("{name}.bias"), vec![outs], 0));
        };
        match &self.embedder {
            EmbedderConfig::Conv28 {
                conv1_channels: c1,
                conv2_channels: c2,
                kernel: k,
                embed_dim,
            } => {
                let side = EmbedderConfig::conv28_side(*k).unwrap_or(0);
                out.push(("embedder.conv1.weight".into(), vec![*c1, 1, *k, *k], k * k));
                out.push(("embedder.conv1.bias".into(), vec![*c1], 0));
                out.push(("embedder.conv2.weight".into(), vec![*c2, *c1, *k, *k], c1 * k * k));
                out.push(("embedder.conv2.bias".into(), vec![*c2], 0));
                linear("embedder.fc", *embed_dim, c2 * side * side, &mut out);
            }
            EmbedderConfig::Mlp {
                input_dim,
                hidden,
                output_dim,
            } => {
                let mut width = *input_dim;
                for (i, &h) in hidden.iter().chain(std::iter::once(output_dim)).enumerate() {
                    linear(&format!("embedder.layers.{i}"), h, width, &mut out);
                    width = h;
                }
            }
            EmbedderConfig::Identity { .. } => {}
        }
        let (m, l) = (self.embedder.embed_dim(), self.attention_dim);
        out.push(("attention.V".into(), vec![l, m], m));
        out.push(("attention.U".into(), vec![l, m], m));
        out.push(("attention.w".into(), vec![l, 1], l));
        linear("classifier", 2, m, &mut out);
        out
    }
}

/// Values produced by one bag forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BagForward<T> {
    /// n×M instance embeddings.
    pub embeddings: Tensor<T>,
    pub attention: Vec<T>,
    pub pooled: Vec<T>,
    pub logits: [T; 2],
}

/// Tape handles of one forward pass, for callers that differentiate.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub embeddings: Var,
    pub attention: Var,
    pub pooled: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: u8,
    /// Softmax probability of `class`.
    pub probability: f64,
}

/// Two-way softmax decision; ties go to class 0.
pub fn predict_from_logits<T: Element>(logits: [T; 2]) -> Prediction {
    let (z0, z1) = (logits[0].as_f64(), logits[1].as_f64());
    let class = u8::from(z1 > z0);
    let gap = if class == 1 { z1 - z0 } else { z0 - z1 };
    Prediction {
        class,
        probability: 1.0 / (1.0 + (-gap).exp()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel<T> {
    config: ModelConfig,
    seed: u64,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Element> MilModel<T> {
    /// Weights ~ U(−√(1/fan_in), √(1/fan_in)), biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let mut t = Tensor::<T>::zeros(shape);
                if fan_in > 0 {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    for v in t.data_mut() {
                        *v = T::from_f64_lossy(rng.random_range(-bound..bound));
                    }
                }
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            seed,
            params,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        seed: u64,
        params: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::Format(format!(
                "architecture expects {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in layout.iter().zip(&params) {
            if name != got_name {
                return Err(Error::Format(format!(
                    "expected tensor {name}, found {got_name}"
                )));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, architecture expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            seed,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embedder.embed_dim()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.config.embedder.input_shape()
    }

    pub fn parameters(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"))
    }

    pub fn is_embedder_param(name: &str) -> bool {
        name.starts_with("embedder.")
    }

    /// Records every parameter on the tape; `trainable(name)` decides
    /// whether gradients are tracked for it.
    pub fn register_params(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(name, t)| {
                let t = t.clone();
                if trainable(name) {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Instance embeddings `H` (n×M) for already-recorded instance inputs.
    pub fn embed_vars(&self, tape: &mut Tape<T>, params: &[Var], inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("cannot embed an empty bag".into()));
        }
        let want = self.input_shape();
        for &x in inputs {
            if tape.shape(x) != want.as_slice() {
                return Err(Error::Dimension(format!(
                    "instance shape {:?} does not match embedder input {want:?}",
                    tape.shape(x)
                )));
            }
        }
        let p = |name: &str| params[self.index_of(name)];
        match &self.config.embedder {
            EmbedderConfig::Conv28 { .. } => {
                let mut flat = Vec::with_capacity(inputs.len());
                for &x in inputs {
                    let y = tape.conv2d(x, p("embedder.conv1.weight"), p("embedder.conv1.bias"))?;
                    let y = tape.relu(y);
                    let y = tape.maxpool2(y)?;
                    let y = tape.conv2d(y, p("embedder.conv2.weight"), p("embedder.conv2.bias"))?;
                    let y = tape.relu(y);
                    let y = tape.maxpool2(y)?;
                    let n = tape.value(y).len();
                    flat.push(tape.reshape(y, [n])?);
                }
                let stacked = tape.stack(&flat)?;
                let h = tape.linear(stacked, p("embedder.fc.weight"), Some(p("embedder.fc.bias")))?;
                Ok(tape.relu(h))
            }
            EmbedderConfig::Mlp { hidden, .. } => {
                let mut h = tape.stack(inputs)?;
                for i in 0..=hidden.len() {
                    let w = p(&format!("embedder.layers.{i}.weight"));
                    let b = p(&format!("embedder.layers.{i}.bias"));
                    let z = tape.linear(h, w, Some(b))?;
                    h = tape.relu(z);
                }
                Ok(h)
            }
            EmbedderConfig::Identity { .. } => tape.stack(inputs),
        }
    }

    /// Attention weights (length n) for embeddings `H` (n×M).
    pub fn attention_vars(&self, tape: &mut Tape<T>, params: &[Var], h: Var) -> Result<Var> {
        let p = |name: &str| params[self.index_of(name)];
        let n = tape.shape(h)[0];
        let v = tape.linear(h, p("attention.V"), None)?;
        let v = tape.tanh(v);
        let u = tape.linear(h, p("attention.U"), None)?;
        let u = tape.sigmoid(u);
        let gated = tape.mul(v, u)?;
        let scores = tape.matmul(gated, p("attention.w"))?;
        let scores = tape.reshape(scores, [n])?;
        tape.softmax(scores, 0, T::one())
    }

    /// Full differentiable forward pass over recorded instance inputs.
    pub fn forward_vars(&self, tape: &mut Tape<T>, params: &[Var], inputs: &[Var]) -> Result<ForwardVars> {
        let embeddings = self.embed_vars(tape, params, inputs)?;
        let attention = self.attention_vars(tape, params, embeddings)?;
        let n = inputs.len();
        let m = self.embed_dim();
        let row = tape.reshape(attention, [1, n])?;
        let pooled = tape.matmul(row, embeddings)?;
        let pooled = tape.reshape(pooled, [m])?;
        let logits = tape.linear(
            pooled,
            params[self.index_of("classifier.weight")],
            Some(params[self.index_of("classifier.bias")]),
        )?;
        Ok(ForwardVars {
            embeddings,
            attention,
            pooled,
            logits,
        })
    }

    /// Inference forward pass; nothing is differentiated.
    pub fn forward(&self, instances: &[Tensor<T>]) -> Result<BagForward<T>> {
        if instances.is_empty() {
            return Err(Error::Contract("forward on an empty bag".into()));
        }
        let mut tape = Tape::new();
        let params = self.register_params(&mut tape, |_| false);
        let inputs: Vec<Var> = instances.iter().map(|x| tape.constant(x.clone())).collect();
        let f = self.forward_vars(&mut tape, &params, &inputs)?;
        Ok(self.collect(&tape, f))
    }

    pub(crate) fn collect(&self, tape: &Tape<T>, f: ForwardVars) -> BagForward<T> {
        let logits = tape.value(f.logits);
        BagForward {
            embeddings: tape.tensor(f.embeddings).clone().with_requires_grad(false),
            attention: tape.value(f.attention).to_vec(),
            pooled: tape.value(f.pooled).to_vec(),
            logits: [logits[0], logits[1]],
        }
    }

    /// Embeddings only (no attention or head).
    pub fn embed(&self, instances: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.register_params(&mut tape, |_| false);
        let inputs: Vec<Var> = instances.iter().map(|x| tape.constant(x.clone())).collect();
        let h = self.embed_vars(&mut tape, &params, &inputs)?;
        Ok(tape.tensor(h).clone().with_requires_grad(false))
    }

    /// Attention weights for given embeddings `H` (n×M).
    pub fn attention(&self, embeddings: &Tensor<T>) -> Result<Vec<T>> {
        if embeddings.ndim() != 2 || embeddings.shape()[1] != self.embed_dim() || embeddings.shape()[0] == 0 {
            return Err(Error::Dimension(format!(
                "attention expects n×{} embeddings, got {:?}",
                self.embed_dim(),
                embeddings.shape()
            )));
        }
        let mut tape = Tape::new();
        let params = self.register_params(&mut tape, |_| false);
        let h = tape.constant(embeddings.clone());
        let a = self.attention_vars(&mut tape, &params, h)?;
        Ok(tape.value(a).to_vec())
    }

    pub fn predict(&self, instances: &[Tensor<T>]) -> Result<Prediction> {
        Ok(predict_from_logits(self.forward(instances)?.logits))
    }

    /// Softmax cross-entropy of the two logits against `label`, on the tape.
    pub fn cross_entropy(tape: &mut Tape<T>, logits: Var, label: u8) -> Result<Var> {
        let lse = tape.logsumexp(logits, T::one())?;
        let picked = tape.pick(logits, label as usize)?;
        tape.sub(lse, picked)
    }

    /// Converts all parameters to another element type.
    pub fn cast<U: Element>(&self) -> MilModel<U> {
        MilModel {
            config: self.config.clone(),
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>().with_requires_grad(false)))
                .collect(),
        }
    }
}
