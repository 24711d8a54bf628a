//! Reconstruction training: corruption, the latent pipeline and the optimizer.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Tape;
use super::tensor::Matrix;
use super::{decode_on_tape, encode_on_tape, ModelParams, TokenSequence, BOS, EOS, MASK, PAD};
use crate::clipping::{ClipMode, ClipSpec};
use crate::error::{invalid_arg, Error, Result};
use crate::mechanisms::{draw, NoiseSpec};
use crate::pruning::PruneMask;
use crate::rng::StreamRng;

/// What happens to the encoder output before the decoder reads it during
/// training: prune, then clip, then add noise. Gradients pass through pruning
/// and clipping; the noise is a constant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentOptions {
    pub mask: Option<PruneMask>,
    pub clip: Option<ClipSpec>,
    pub noise: Option<NoiseSpec>,
}

impl LatentOptions {
    fn validate(&self, params: &ModelParams) -> Result<()> {
        let (tokens, width) = params.config.latent_shape();
        let pruned = match &self.mask {
            Some(m) if m.d_tok() != width => {
                return invalid_arg(format!("mask width {} does not match latent width {width}", m.d_tok()))
            }
            Some(m) => m.len(),
            None => 0,
        };
        if let Some(c) = &self.clip {
            c.validate()?;
        }
        if let Some(n) = &self.noise {
            n.validate()?;
            let alive = tokens * (width - pruned);
            if n.dimension != alive {
                return invalid_arg(format!(
                    "noise is for {} coordinates but the latent has {alive} unpruned",
                    n.dimension
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Rescale the full gradient to at most this ℓ₂ norm.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate: 2e-3,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum },
            learning_rate,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params.tensors.iter().map(|t| Matrix::zeros(t.rows, t.cols)).collect();
        let second = match config.kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            config,
            first: zeros,
            second,
            steps: 0,
        }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &mut [Option<Matrix>]) {
        if let Some(max) = self.config.grad_clip {
            let norm = grads.iter().flatten().map(Matrix::frobenius_sq).sum::<f64>().sqrt();
            if norm > max {
                grads.iter_mut().flatten().for_each(|g| g.scale_assign(max / norm));
            }
        }
        self.steps += 1;
        let lr = self.config.learning_rate;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut params.tensors[i].data;
            let m = &mut self.first[i].data;
            match self.config.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((p, m), g) in p.iter_mut().zip(m.iter_mut()).zip(&g.data) {
                        *m = momentum * *m + g;
                        *p -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[i].data;
                    let c1 = 1.0 - beta1.powi(self.steps as i32);
                    let c2 = 1.0 - beta2.powi(self.steps as i32);
                    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g.data) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Batch and corruption settings shared by every training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub delete_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            mask_prob: 0.0,
            delete_prob: 0.0,
        }
    }
}

/// Masks or deletes content tokens (the begin and end markers are kept).
pub fn corrupt(x: &TokenSequence, rng: &mut StreamRng, mask_prob: f64, delete_prob: f64) -> Result<TokenSequence> {
    for (name, p) in [("mask_prob", mask_prob), ("delete_prob", delete_prob)] {
        if !(0.0..1.0).contains(&p) {
            return invalid_arg(format!("{name} must lie in [0, 1), got {p}"));
        }
    }
    if mask_prob + delete_prob > 1.0 {
        return invalid_arg("mask_prob + delete_prob exceeds 1");
    }
    let mut out = Vec::with_capacity(x.ids.len());
    for &t in &x.ids[..x.len] {
        if t == BOS || t == EOS || t == PAD {
            out.push(t);
            continue;
        }
        let u: f64 = rng.gen();
        if u < mask_prob {
            out.push(MASK);
        } else if u >= mask_prob + delete_prob {
            out.push(t);
        }
    }
    Ok(TokenSequence::from_ids(out, x.ids.len()))
}

fn targets(batch: &[(TokenSequence, TokenSequence)]) -> Vec<Option<usize>> {
    batch
        .iter()
        .flat_map(|(_, y)| y.ids[1..].iter().map(|&t| (t != PAD).then_some(t)))
        .collect()
}

fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &[(TokenSequence, TokenSequence)],
    options: &LatentOptions,
    rng: &mut StreamRng,
) -> Result<super::tape::Var> {
    if batch.is_empty() {
        return invalid_arg("empty training batch");
    }
    options.validate(params)?;
    let inputs: Vec<&TokenSequence> = batch.iter().map(|(x, _)| x).collect();
    let outputs: Vec<&TokenSequence> = batch.iter().map(|(_, y)| y).collect();
    params.check_ids(&inputs)?;
    params.check_ids(&outputs)?;
    let bound = params.bind(tape);
    let mut z = encode_on_tape(tape, &bound, &inputs);
    let (tokens, width) = params.config.latent_shape();
    if let Some(m) = &options.mask {
        z = tape.zero_cols(z, m.indices());
    }
    if let Some(c) = &options.clip {
        z = match c.mode {
            ClipMode::ByValue => tape.clip_value(z, c.c_min, c.c_max),
            ClipMode::ByNorm => tape.clip_norm_groups(z, c.c, tokens),
        };
    }
    if let Some(spec) = &options.noise {
        let dead: Vec<bool> = (0..width)
            .map(|j| options.mask.as_ref().is_some_and(|m| m.contains(j)))
            .collect();
        let rows = batch.len() * tokens;
        let mut noise = Matrix::zeros(rows, width);
        for r in 0..rows {
            for (v, &d) in noise.row_mut(r).iter_mut().zip(&dead) {
                if !d {
                    *v = draw(spec, rng);
                }
            }
        }
        let n = tape.constant(noise);
        z = tape.add(z, n);
    }
    let logits = decode_on_tape(tape, &bound, z, &outputs);
    Ok(tape.cross_entropy(logits, &targets(batch)))
}

/// Mean token cross-entropy over `(input, target)` pairs, without gradients.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[(TokenSequence, TokenSequence)],
    options: &LatentOptions,
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = forward(&mut tape, params, batch, options, rng)?;
    Ok(tape.value(loss).data[0])
}

/// Loss and its gradient with respect to every parameter tensor, in
/// `params.tensors` order (`None` when a tensor does not affect the loss).
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &[(TokenSequence, TokenSequence)],
    options: &LatentOptions,
    rng: &mut StreamRng,
) -> Result<(f64, Vec<Option<Matrix>>)> {
    let mut tape = Tape::new();
    let loss = forward(&mut tape, params, batch, options, rng)?;
    let value = tape.value(loss).data[0];
    Ok((value, tape.backward(loss, params.tensors.len())))
}

pub fn train_step(
    params: &mut ModelParams,
    batch: &[(TokenSequence, TokenSequence)],
    opt: &mut Optimizer,
    options: &LatentOptions,
    rng: &mut StreamRng,
) -> Result<f64> {
    if params.frozen {
        return Err(Error::InvalidState("model is frozen".into()));
    }
    let (loss, mut grads) = loss_and_gradients(params, batch, options, rng)?;
    if !loss.is_finite() {
        return Err(Error::Diagnostic(format!("training loss is {loss}")));
    }
    opt.apply(params, &mut grads);
    if !params.is_finite() {
        return Err(Error::Diagnostic("parameters became non-finite".into()));
    }
    Ok(loss)
}

fn make_batch(
    docs: &[&TokenSequence],
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    docs.iter()
        .map(|y| Ok((corrupt(y, rng, cfg.mask_prob, cfg.delete_prob)?, (*y).clone())))
        .collect()
}

/// One pass over `corpus` in shuffled order; returns the mean batch loss.
pub fn train_epoch(
    params: &mut ModelParams,
    corpus: &[TokenSequence],
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    options: &LatentOptions,
    rng: &mut StreamRng,
) -> Result<f64> {
    if cfg.batch_size == 0 || corpus.is_empty() {
        return invalid_arg("training needs a positive batch size and a nonempty corpus");
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut count = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let docs: Vec<&TokenSequence> = chunk.iter().map(|&i| &corpus[i]).collect();
        let batch = make_batch(&docs, cfg, rng)?;
        total += train_step(params, &batch, opt, options, rng)?;
        count += 1;
    }
    Ok(total / count as f64)
}

/// `steps` updates on uniformly sampled batches; returns the mean loss.
pub fn train_steps(
    params: &mut ModelParams,
    corpus: &[TokenSequence],
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    options: &LatentOptions,
    steps: usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    if cfg.batch_size == 0 || corpus.is_empty() {
        return invalid_arg("training needs a positive batch size and a nonempty corpus");
    }
    let mut total = 0.0;
    for _ in 0..steps {
        let docs: Vec<&TokenSequence> = (0..cfg.batch_size)
            .map(|_| &corpus[rng.gen_range(0..corpus.len())])
            .collect();
        let batch = make_batch(&docs, cfg, rng)?;
        total += train_step(params, &batch, opt, options, rng)?;
    }
    Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
}

/// Mean loss over a corpus in fixed batches, no corruption.
pub fn corpus_loss(
    params: &ModelParams,
    corpus: &[TokenSequence],
    options: &LatentOptions,
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0usize;
    for chunk in corpus.chunks(64) {
        let batch: Vec<_> = chunk.iter().map(|y| (y.clone(), y.clone())).collect();
        let tokens = targets(&batch).iter().flatten().count();
        total += batch_loss(params, &batch, options, rng)? * tokens as f64;
        weight += tokens;
    }
    if weight == 0 {
        return invalid_arg("corpus has no target tokens");
    }
    Ok(total / weight as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::Mechanism;
    use crate::model::tests::seq;
    use crate::model::{Architecture, ModelConfig};
    use crate::rng::stream;

    fn micro(arch: Architecture) -> ModelParams {
        let cfg = ModelConfig {
            architecture: arch,
            d_tok: 4,
            layers: 1,
            heads: 2,
            hidden: 4,
            embed_dim: 3,
            max_len: 4,
            vocab_size: 7,
        };
        ModelParams::init(&cfg, 2).unwrap()
    }

    #[test]
    fn corruption_extremes() {
        let mut rng = stream(1, 0);
        let x = seq(&[5, 6, 5], 8);
        assert_eq!(corrupt(&x, &mut rng, 0.0, 0.0).unwrap(), x);
        let m = corrupt(&x, &mut rng, 0.999_999_999, 0.0).unwrap();
        assert_eq!(m.content(), &[MASK, MASK, MASK]);
        assert!(corrupt(&x, &mut rng, 1.0, 0.0).is_err());
        let d = corrupt(&x, &mut rng, 0.0, 0.999_999_999).unwrap();
        assert_eq!(d.ids[..3], [BOS, EOS, PAD]);
        assert_eq!(d.len, 2);
    }

    #[test]
    fn masking_rate_matches() {
        let mut rng = stream(3, 0);
        let x = seq(&[5; 18], 20);
        let mut masked = 0;
        let trials = 100_000 / 18 + 1;
        for _ in 0..trials {
            masked += corrupt(&x, &mut rng, 0.3, 0.0).unwrap().ids.iter().filter(|&&t| t == MASK).count();
        }
        let rate = masked as f64 / (trials * 18) as f64;
        assert!((rate - 0.3).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn frozen_and_empty_batches_are_rejected() {
        let mut p = micro(Architecture::TinyTransformer);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &p);
        let mut rng = stream(0, 0);
        assert!(train_step(&mut p, &[], &mut opt, &LatentOptions::default(), &mut rng).is_err());
        p.frozen = true;
        let b = vec![(seq(&[5], 4), seq(&[5], 4))];
        assert!(matches!(
            train_step(&mut p, &b, &mut opt, &LatentOptions::default(), &mut rng),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn noise_dimension_must_match_mask() {
        let p = micro(Architecture::TinyTransformer);
        let mask = PruneMask::new(vec![1], 4).unwrap();
        let b = vec![(seq(&[5], 4), seq(&[5], 4))];
        let mut rng = stream(0, 0);
        let bad = LatentOptions {
            mask: Some(mask.clone()),
            clip: None,
            noise: Some(NoiseSpec::new(Mechanism::Gaussian, 0.1, 16).unwrap()),
        };
        assert!(batch_loss(&p, &b, &bad, &mut rng).is_err());
        let good = LatentOptions {
            noise: Some(NoiseSpec::new(Mechanism::Gaussian, 0.1, 12).unwrap()),
            ..bad
        };
        assert!(batch_loss(&p, &b, &good, &mut rng).unwrap().is_finite());
    }

    #[test]
    fn single_sentence_overfits() {
        for arch in [Architecture::TinyTransformer, Architecture::RecurrentBaseline] {
            let mut p = ModelParams::init(&ModelConfig { max_len: 6, ..ModelConfig::transformer(12) }.with_architecture(arch), 2).unwrap();
            let cfg = OptimizerConfig {
                grad_clip: Some(1.0),
                ..OptimizerConfig::sgd(0.02, 0.3)
            };
            let mut opt = Optimizer::new(cfg, &p);
            let b = vec![(seq(&[5, 6, 9, 7], 6), seq(&[5, 6, 9, 7], 6))];
            let mut rng = stream(0, 0);
            let opts = LatentOptions::default();
            let first = batch_loss(&p, &b, &opts, &mut rng).unwrap();
            let mut prev = f64::INFINITY;
            for _ in 0..50 {
                let loss = train_step(&mut p, &b, &mut opt, &opts, &mut rng).unwrap();
                assert!(loss <= prev + 1e-9, "{arch:?}: {loss} after {prev}");
                prev = loss;
            }
            assert!(prev < first * 0.9, "{arch:?}: {first} -> {prev}");
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for arch in [Architecture::TinyTransformer, Architecture::RecurrentBaseline] {
            let mut p = micro(arch);
            let b = vec![(seq(&[5, 6], 4), seq(&[5, 6], 4)), (seq(&[6], 4), seq(&[5], 4))];
            let opts = LatentOptions::default();
            let (_, grads) = loss_and_gradients(&p, &b, &opts, &mut stream(0, 0)).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for t in 0..p.tensors.len() {
                for e in 0..p.tensors[t].len() {
                    let orig = p.tensors[t].data[e];
                    p.tensors[t].data[e] = orig + h;
                    let up = batch_loss(&p, &b, &opts, &mut stream(0, 0)).unwrap();
                    p.tensors[t].data[e] = orig - h;
                    let down = batch_loss(&p, &b, &opts, &mut stream(0, 0)).unwrap();
                    p.tensors[t].data[e] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads[t].as_ref().map_or(0.0, |g| g.data[e]);
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    if rel > worst {
                        eprintln!("{arch:?} {} [{e}] an {an} fd {fd}", p.names[t]);
                    }
                    worst = worst.max(rel);
                }
            }
            assert!(worst <= 1e-4, "{arch:?}: worst relative error {worst}");
        }
    }
}
