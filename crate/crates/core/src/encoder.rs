//! Pre-norm transformer encoder over a single unpadded sequence, recording
//! every head's attention matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NodeId, NumericsError, Tape, Tensor};
use crate::tokenizer::Polarity;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const TENSORS_PER_LAYER: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub classes: usize,
}

impl ModelConfig {
    /// L=2, A=4, d=64, ffn=256.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn: 256,
            max_len: 128,
            vocab_size,
            dropout: 0.1,
            classes: Polarity::COUNT,
        }
    }

    /// L=1, A=2, d=8: small enough to finite-difference every parameter.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 16,
            max_len: 16,
            vocab_size,
            dropout: 0.0,
            classes: Polarity::COUNT,
        }
    }

    /// Dimensions of the large pretrained encoder the scheme was designed for
    /// (24 layers, 16 heads, hidden 1024). Not trainable here; kept for reference.
    pub fn full_scale_reference(vocab_size: usize) -> Self {
        Self {
            layers: 24,
            heads: 16,
            hidden: 1024,
            ffn: 4096,
            max_len: 512,
            vocab_size,
            dropout: 0.1,
            classes: Polarity::COUNT,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.heads == 0 || self.hidden == 0 || self.ffn == 0 || self.max_len == 0 {
            return bad("heads, hidden, ffn and max_len must be at least 1");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1");
        }
        if self.hidden % self.heads != 0 {
            return bad("hidden must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.classes != Polarity::COUNT {
            return bad("class count must be 3");
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.hidden, self.ffn);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            out.extend([
                (p("attn.query.weight"), vec![d, d]),
                (p("attn.query.bias"), vec![d]),
                (p("attn.key.weight"), vec![d, d]),
                (p("attn.key.bias"), vec![d]),
                (p("attn.value.weight"), vec![d, d]),
                (p("attn.value.bias"), vec![d]),
                (p("attn.output.weight"), vec![d, d]),
                (p("attn.output.bias"), vec![d]),
                (p("attn_norm.gain"), vec![d]),
                (p("attn_norm.bias"), vec![d]),
                (p("ffn.in.weight"), vec![d, f]),
                (p("ffn.in.bias"), vec![f]),
                (p("ffn.out.weight"), vec![f, d]),
                (p("ffn.out.bias"), vec![d]),
                (p("ffn_norm.gain"), vec![d]),
                (p("ffn_norm.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("final_norm.gain".to_string(), vec![d]),
            ("final_norm.bias".to_string(), vec![d]),
            ("classifier.weight".to_string(), vec![d, self.classes]),
            ("classifier.bias".to_string(), vec![self.classes]),
        ]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// All trainable arrays, in a fixed order shared with gradients, optimizer
/// moments and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// normal(0, 0.02) weights and embeddings, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let (names, tensors) = config
            .shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gain") {
                    Tensor::filled(&shape, 1.0)
                } else if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::new(shape, data).expect("shape from config")
                };
                (name, t)
            })
            .unzip();
        Ok(Self { names, tensors })
    }

    /// Rebuilds parameters from named arrays; names and shapes must match `config`.
    pub fn from_named(
        config: &ModelConfig,
        mut named: Vec<(String, Tensor)>,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let shapes = config.shapes();
        if named.len() != shapes.len() {
            return Err(EncoderError::InvalidConfig(format!(
                "expected {} parameter arrays, got {}",
                shapes.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        for ((name, shape), (got_name, t)) in shapes.iter().zip(named.drain(..)) {
            if *name != got_name || t.shape() != shape.as_slice() {
                return Err(EncoderError::InvalidConfig(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self {
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every array as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }
}

/// Tape handles of a [`ModelParams`], same order.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<NodeId>);

impl BoundParams {
    /// Wraps leaves that already hold a model's arrays in canonical order.
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.0
    }

    fn layer(&self, l: usize) -> &[NodeId] {
        let start = 2 + l * TENSORS_PER_LAYER;
        &self.0[start..start + TENSORS_PER_LAYER]
    }

    fn tail(&self) -> &[NodeId] {
        &self.0[self.0.len() - 4..]
    }

    pub fn classifier(&self) -> (NodeId, NodeId) {
        let t = self.tail();
        (t[2], t[3])
    }

    /// Gradient of every parameter after `tape.backward`; zeros where unused.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map_or_else(|| vec![0.0; tape.value(id).len()], <[f64]>::to_vec)
            })
            .collect()
    }
}

/// Per layer, per head, a `T x T` row-stochastic attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelector {
    Layer(usize),
    All,
}

impl std::str::FromStr for LayerSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            Ok(LayerSelector::All)
        } else {
            s.parse()
                .map(LayerSelector::Layer)
                .map_err(|_| format!("layer must be an integer or 'all', got '{s}'"))
        }
    }
}

/// Mean over heads (and over layers for [`LayerSelector::All`]).
pub fn average_attention(
    record: &AttentionRecord,
    layer: LayerSelector,
) -> Result<Tensor, EncoderError> {
    let layers = record.layers.len();
    let chosen: Vec<&Vec<Tensor>> = match layer {
        LayerSelector::Layer(l) if l < layers => vec![&record.layers[l]],
        LayerSelector::Layer(l) => return Err(EncoderError::LayerOutOfRange { layer: l, layers }),
        LayerSelector::All if layers == 0 => {
            return Err(EncoderError::LayerOutOfRange { layer: 0, layers })
        }
        LayerSelector::All => record.layers.iter().collect(),
    };
    let shape = chosen[0][0].shape().to_vec();
    let mut acc = vec![0.0; chosen[0][0].len()];
    let mut count = 0.0;
    for heads in chosen {
        for h in heads {
            acc.iter_mut().zip(h.data()).for_each(|(a, v)| *a += v);
            count += 1.0;
        }
    }
    acc.iter_mut().for_each(|a| *a /= count);
    Ok(Tensor::new(shape, acc)?)
}

/// Mixes a base seed and a stream index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the encoder on `tape` with already-bound parameters and returns the
/// final-layer hidden states `[T x d]`.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    config: &ModelConfig,
    ids: &[usize],
    mode: Mode,
    seed: u64,
) -> Result<(NodeId, AttentionRecord), EncoderError> {
    let t = ids.len();
    if t == 0 {
        return Err(EncoderError::EmptySequence);
    }
    if t > config.max_len {
        return Err(EncoderError::SequenceTooLong {
            len: t,
            max: config.max_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&i| i >= config.vocab_size) {
        return Err(EncoderError::IdOutOfRange {
            id,
            vocab: config.vocab_size,
        });
    }
    let train = mode == Mode::Train;
    let p = config.dropout;
    let mut stream = 0u64;
    let mut drop = |tape: &mut Tape, x: NodeId| {
        stream += 1;
        tape.dropout(x, p, derive_seed(seed, stream), train)
    };

    let all = params.ids();
    let tok = tape.embedding_lookup(all[0], ids)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.embedding_lookup(all[1], &positions)?;
    let x = tape.add(tok, pos)?;
    let mut x = drop(tape, x)?;

    let heads = config.heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let w = params.layer(l);
        let h = tape.layer_norm(x, w[8], w[9], LAYER_NORM_EPS)?;
        let project = |tape: &mut Tape, wi: NodeId, bi: NodeId| -> Result<NodeId, NumericsError> {
            let y = tape.matmul(h, wi)?;
            tape.add_row(y, bi)
        };
        let q = project(tape, w[0], w[1])?;
        let k = project(tape, w[2], w[3])?;
        let v = project(tape, w[4], w[5])?;
        let mut head_out = Vec::with_capacity(heads);
        let mut maps = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores)?;
            maps.push(tape.value(probs).clone());
            head_out.push(tape.matmul(probs, vh)?);
        }
        attention.push(maps);
        let merged = if heads == 1 {
            head_out[0]
        } else {
            tape.concat_cols(&head_out)?
        };
        let o = tape.matmul(merged, w[6])?;
        let o = tape.add_row(o, w[7])?;
        let o = drop(tape, o)?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm(x, w[14], w[15], LAYER_NORM_EPS)?;
        let f = tape.matmul(h, w[10])?;
        let f = tape.add_row(f, w[11])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w[12])?;
        let f = tape.add_row(f, w[13])?;
        let f = drop(tape, f)?;
        x = tape.add(x, f)?;
    }
    let tail = params.tail();
    let hidden = tape.layer_norm(x, tail[0], tail[1], LAYER_NORM_EPS)?;
    Ok((hidden, AttentionRecord { layers: attention }))
}

/// Standalone forward pass: hidden states `[T x d]` and attention maps.
pub fn forward(
    ids: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor, AttentionRecord), EncoderError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (hidden, attention) = forward_on_tape(&mut tape, &bound, config, ids, mode, seed)?;
    Ok((tape.value(hidden).clone(), attention))
}
