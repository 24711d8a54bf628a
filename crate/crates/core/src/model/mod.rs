//! Toy sequence-to-sequence autoencoders trained from scratch.
//!
//! Two architectures share one parameter store and one latent contract:
//!
//! * [`Architecture::TinyTransformer`]: pre-norm encoder/decoder with
//!   cross-attention. The latent is the final encoder state of every position,
//!   an `l × d_tok` matrix.
//! * [`Architecture::RecurrentBaseline`]: single-layer unidirectional LSTM
//!   encoder and decoder. The latent is `[h_T, c_T]`, one row of `2·hidden`.
//!
//! Training runs on a [`tape::Tape`]; inference uses the eager kernels in
//! [`tensor`] with a per-layer key/value cache so beam search stays cheap.

pub mod checkpoint;
pub mod decode;
mod recurrent;
pub mod tape;
pub mod tensor;
pub mod train;
mod transformer;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::latent::LatentVector;
use crate::rng::{purpose, stream};
use tape::{Tape, Var};
use tensor::Matrix;

pub use decode::{decode, decode_batch, DecodeStrategy};
pub use train::{corrupt, train_step, LatentOptions, Optimizer, OptimizerConfig};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;
pub const RESERVED: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TinyTransformer,
    RecurrentBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Per-token latent width (transformer model width).
    pub d_tok: usize,
    pub layers: usize,
    pub heads: usize,
    /// Recurrent hidden size; the recurrent latent has `2·hidden` values.
    pub hidden: usize,
    /// Recurrent embedding width. The transformer embeds directly into `d_tok`.
    pub embed_dim: usize,
    /// Sequence length `l`; every sequence is padded or truncated to it.
    pub max_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn transformer(vocab_size: usize) -> Self {
        ModelConfig {
            architecture: Architecture::TinyTransformer,
            d_tok: 32,
            layers: 2,
            heads: 2,
            hidden: 64,
            embed_dim: 32,
            max_len: 20,
            vocab_size,
        }
    }

    pub fn recurrent(vocab_size: usize) -> Self {
        ModelConfig {
            architecture: Architecture::RecurrentBaseline,
            ..ModelConfig::transformer(vocab_size)
        }
    }

    pub fn with_architecture(self, architecture: Architecture) -> Self {
        ModelConfig { architecture, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_tok", self.d_tok),
            ("layers", self.layers),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return invalid_arg(format!("{name} must be positive"));
            }
        }
        if self.d_tok % self.heads != 0 {
            return invalid_arg(format!(
                "d_tok {} is not divisible by {} heads",
                self.d_tok, self.heads
            ));
        }
        if self.max_len < 2 {
            return invalid_arg("max_len must leave room for the begin and end markers");
        }
        if self.vocab_size <= RESERVED {
            return invalid_arg("vocabulary holds nothing beyond the reserved tokens");
        }
        Ok(())
    }

    /// `(tokens, width)` of the latent this architecture produces.
    pub fn latent_shape(&self) -> (usize, usize) {
        match self.architecture {
            Architecture::TinyTransformer => (self.max_len, self.d_tok),
            Architecture::RecurrentBaseline => (1, 2 * self.hidden),
        }
    }

    pub fn latent_dim(&self) -> usize {
        let (t, w) = self.latent_shape();
        t * w
    }
}

/// Token ids padded or truncated to exactly `max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Number of leading non-pad positions.
    pub len: usize,
}

impl TokenSequence {
    /// Pads (or truncates) `ids` to `max_len`.
    pub fn from_ids(mut ids: Vec<usize>, max_len: usize) -> Self {
        ids.truncate(max_len);
        let len = ids.len();
        ids.resize(max_len, PAD);
        TokenSequence { ids, len }
    }

    /// The ids strictly between the begin marker and the first end marker.
    pub fn content(&self) -> &[usize] {
        let body = &self.ids[..self.len];
        let start = usize::from(body.first() == Some(&BOS));
        let end = body[start..]
            .iter()
            .position(|&t| t == EOS || t == PAD)
            .map_or(body.len(), |p| p + start);
        &body[start..end]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
    pub frozen: bool,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Randomly initialised parameters, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = match config.architecture {
            Architecture::TinyTransformer => transformer::param_specs(config),
            Architecture::RecurrentBaseline => recurrent::param_specs(config),
        };
        let mut rng = stream(seed, purpose::INIT);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let data = match spec.init {
                Init::Zeros => vec![0.0; spec.rows * spec.cols],
                Init::Const(c) => vec![c; spec.rows * spec.cols],
                Init::Normal(std) => (0..spec.rows * spec.cols)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            };
            names.push(spec.name);
            tensors.push(Matrix::from_vec(spec.rows, spec.cols, data));
        }
        let mut params = Self::from_parts(config.clone(), names, tensors, false);
        if config.architecture == Architecture::RecurrentBaseline {
            recurrent::adjust_init(&mut params);
        }
        Ok(params)
    }

    pub fn from_parts(config: ModelConfig, names: Vec<String>, tensors: Vec<Matrix>, frozen: bool) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParams {
            config,
            names,
            tensors,
            frozen,
            index,
        }
    }

    pub fn idx(&self, name: &str) -> usize {
        match self.index.get(name) {
            Some(i) => *i,
            None => panic!("model has no parameter `{name}`"),
        }
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self.tensors[self.idx(name)]
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Cross-attention key projection of the first decoder layer, laid out as
    /// `attention width × d_tok` so column `j` holds every weight reading
    /// encoder-output neuron `j`.
    pub fn first_cross_key_projection(&self) -> Result<Matrix> {
        match self.config.architecture {
            Architecture::TinyTransformer => Ok(self.get("dec.0.cross.wk").transpose()),
            Architecture::RecurrentBaseline => Err(Error::InvalidState(
                "the recurrent baseline has no cross-attention to score".into(),
            )),
        }
    }

    /// Rounds every weight through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, m)| tape.param(i, m))
            .collect();
        Bound { params: self, vars }
    }

    fn check_ids(&self, seqs: &[&TokenSequence]) -> Result<()> {
        let cfg = &self.config;
        for s in seqs {
            if s.ids.len() != cfg.max_len {
                return invalid_arg(format!(
                    "sequence has {} ids, model expects {}",
                    s.ids.len(),
                    cfg.max_len
                ));
            }
            if let Some(bad) = s.ids.iter().find(|&&t| t >= cfg.vocab_size) {
                return invalid_arg(format!(
                    "token id {bad} is outside the vocabulary of {}",
                    cfg.vocab_size
                ));
            }
        }
        Ok(())
    }
}

pub(crate) enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
}

pub(crate) struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}

/// Parameters bound to tape variables for one forward pass.
pub(crate) struct Bound<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    fn v(&self, name: &str) -> Var {
        self.vars[self.params.idx(name)]
    }
}

/// Encoder forward on the tape for a batch; rows are `batch · tokens`.
fn encode_on_tape(tape: &mut Tape, bound: &Bound<'_>, batch: &[&TokenSequence]) -> Var {
    match bound.params.config.architecture {
        Architecture::TinyTransformer => transformer::encode(tape, bound, batch),
        Architecture::RecurrentBaseline => recurrent::encode(tape, bound, batch),
    }
}

/// Teacher-forced decoder logits on the tape; rows are `batch · (max_len - 1)`.
fn decode_on_tape(tape: &mut Tape, bound: &Bound<'_>, latent: Var, targets: &[&TokenSequence]) -> Var {
    match bound.params.config.architecture {
        Architecture::TinyTransformer => transformer::decode_logits(tape, bound, latent, targets),
        Architecture::RecurrentBaseline => recurrent::decode_logits(tape, bound, latent, targets),
    }
}

/// Deterministic latent of one sequence.
pub fn encode(x: &TokenSequence, params: &ModelParams) -> Result<LatentVector> {
    Ok(encode_batch(&[x.clone()], params)?.remove(0))
}

pub fn encode_batch(xs: &[TokenSequence], params: &ModelParams) -> Result<Vec<LatentVector>> {
    let refs: Vec<&TokenSequence> = xs.iter().collect();
    params.check_ids(&refs)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let z = encode_on_tape(&mut tape, &bound, &refs);
    let (tokens, width) = params.config.latent_shape();
    let all = tape.value(z);
    Ok((0..xs.len())
        .map(|b| LatentVector {
            tokens,
            width,
            data: all.data[b * tokens * width..(b + 1) * tokens * width].to_vec(),
        })
        .collect())
}

/// Teacher-forced per-position logits for one latent, `(max_len - 1) × vocab`.
pub fn teacher_forced_logits(z: &LatentVector, target: &TokenSequence, params: &ModelParams) -> Result<Matrix> {
    params.check_ids(&[target])?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let latent = tape.constant(z.per_token());
    let logits = decode_on_tape(&mut tape, &bound, latent, &[target]);
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn seq(ids: &[usize], l: usize) -> TokenSequence {
        let mut v = vec![BOS];
        v.extend_from_slice(ids);
        v.push(EOS);
        TokenSequence::from_ids(v, l)
    }

    fn micro(arch: Architecture) -> ModelConfig {
        ModelConfig {
            architecture: arch,
            d_tok: 8,
            layers: 2,
            heads: 2,
            hidden: 6,
            embed_dim: 5,
            max_len: 6,
            vocab_size: 12,
        }
    }

    #[test]
    fn latent_shapes() {
        for (arch, shape) in [
            (Architecture::TinyTransformer, (6, 8)),
            (Architecture::RecurrentBaseline, (1, 12)),
        ] {
            let p = ModelParams::init(&micro(arch), 1).unwrap();
            let z = encode(&seq(&[5, 6, 7], 6), &p).unwrap();
            assert_eq!((z.tokens, z.width), shape);
        }
        assert_eq!(ModelConfig::transformer(500).latent_dim(), 640);
        assert_eq!(ModelConfig::recurrent(500).latent_dim(), 128);
    }

    #[test]
    fn encode_is_deterministic_and_checks_vocab() {
        let p = ModelParams::init(&micro(Architecture::TinyTransformer), 9).unwrap();
        let x = seq(&[5, 9], 6);
        assert_eq!(encode(&x, &p).unwrap(), encode(&x, &p).unwrap());
        let q = ModelParams::init(&micro(Architecture::TinyTransformer), 9).unwrap();
        assert_eq!(p, q);
        assert!(encode(&seq(&[40], 6), &p).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = micro(Architecture::TinyTransformer);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.vocab_size = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn content_strips_markers() {
        let s = seq(&[7, 8], 6);
        assert_eq!(s.content(), &[7, 8]);
        let truncated = TokenSequence::from_ids(vec![BOS, 5, 6, 7, 8, 9, 10], 6);
        assert_eq!(truncated.content(), &[5, 6, 7, 8, 9]);
    }
}
