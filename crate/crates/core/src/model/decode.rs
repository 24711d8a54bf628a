//! Autoregressive generation from a latent.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tensor::log_softmax;
use super::{recurrent, transformer, Architecture, ModelParams, TokenSequence, BOS, EOS, MASK, PAD};
use crate::error::{invalid_arg, Error, Result};
use crate::latent::LatentVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

impl fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeStrategy::Greedy => write!(f, "greedy"),
            DecodeStrategy::Beam(w) => write!(f, "beam({w})"),
        }
    }
}

impl FromStr for DecodeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(DecodeStrategy::Greedy);
        }
        match s.parse::<usize>() {
            Ok(w) if w > 0 => Ok(DecodeStrategy::Beam(w)),
            _ => invalid_arg(format!("decode strategy must be `greedy` or a positive beam width, got `{s}`")),
        }
    }
}

/// Never generated: they carry no content or only make sense as inputs.
fn banned(token: usize) -> bool {
    token == PAD || token == MASK || token == BOS
}

enum Stepper<'a> {
    Transformer(transformer::Decoder<'a>),
    Recurrent(recurrent::Decoder<'a>),
}

#[derive(Clone)]
enum State {
    Transformer(transformer::State),
    Recurrent(recurrent::State),
}

impl Stepper<'_> {
    fn start(&self) -> State {
        match self {
            Stepper::Transformer(d) => State::Transformer(d.start()),
            Stepper::Recurrent(d) => State::Recurrent(d.start()),
        }
    }

    /// Feeds `token` and returns log-probabilities of the next one.
    fn step(&self, state: &mut State, token: usize) -> Vec<f64> {
        let logits = match (self, state) {
            (Stepper::Transformer(d), State::Transformer(s)) => d.step(s, token),
            (Stepper::Recurrent(d), State::Recurrent(s)) => d.step(s, token),
            _ => unreachable!("decoder and state come from the same architecture"),
        };
        log_softmax(&logits)
    }
}

fn stepper<'a>(z: &LatentVector, params: &'a ModelParams) -> Result<Stepper<'a>> {
    let (tokens, width) = params.config.latent_shape();
    if (z.tokens, z.width) != (tokens, width) {
        return invalid_arg(format!(
            "latent is {}x{}, model expects {tokens}x{width}",
            z.tokens, z.width
        ));
    }
    let m = z.per_token();
    Ok(match params.config.architecture {
        Architecture::TinyTransformer => Stepper::Transformer(transformer::Decoder::new(params, &m)),
        Architecture::RecurrentBaseline => Stepper::Recurrent(recurrent::Decoder::new(params, &m)),
    })
}

pub fn decode(z: &LatentVector, params: &ModelParams, strategy: DecodeStrategy) -> Result<TokenSequence> {
    let stepper = stepper(z, params)?;
    let l = params.config.max_len;
    let ids = match strategy {
        DecodeStrategy::Greedy => greedy(&stepper, l),
        DecodeStrategy::Beam(0) => return invalid_arg("beam width must be positive"),
        DecodeStrategy::Beam(w) => beam(&stepper, l, w),
    };
    Ok(TokenSequence::from_ids(ids, l))
}

/// Decodes every latent, splitting the work over the available cores. Output
/// order follows input order.
pub fn decode_batch(zs: &[LatentVector], params: &ModelParams, strategy: DecodeStrategy) -> Result<Vec<TokenSequence>> {
    crate::parallel::map(zs, |z| decode(z, params, strategy)).into_iter().collect()
}

fn greedy(stepper: &Stepper<'_>, l: usize) -> Vec<usize> {
    let mut state = stepper.start();
    let mut out = vec![BOS];
    while out.len() < l {
        let lp = stepper.step(&mut state, *out.last().unwrap());
        let mut best: Option<usize> = None;
        for (t, &v) in lp.iter().enumerate() {
            if !banned(t) && best.map_or(true, |b| v > lp[b]) {
                best = Some(t);
            }
        }
        let t = best.expect("vocabulary has unbanned tokens");
        out.push(t);
        if t == EOS {
            break;
        }
    }
    out
}

struct Hyp {
    ids: Vec<usize>,
    score: f64,
    state: State,
    next: Vec<f64>,
}

/// Beam search on summed log-probability without length normalisation.
///
/// Each step ranks every (beam, token) extension by score, ties going to the
/// lower beam index then the lower token id. An end marker among the top
/// `width` ranks finishes a hypothesis; the best `width` other extensions stay
/// alive. Search stops once no alive hypothesis can beat the best finished one.
fn beam(stepper: &Stepper<'_>, l: usize, width: usize) -> Vec<usize> {
    let mut state = stepper.start();
    let next = stepper.step(&mut state, BOS);
    let mut alive = vec![Hyp {
        ids: vec![BOS],
        score: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();

    while !alive.is_empty() {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, h) in alive.iter().enumerate() {
            for (t, &lp) in h.next.iter().enumerate() {
                if !banned(t) {
                    cands.push((h.score + lp, bi, t));
                }
            }
        }
        let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        };
        // At most one end marker per beam, so the first `width + alive` ranks
        // are all the loop below can reach.
        let keep = width + alive.len();
        if cands.len() > keep {
            cands.select_nth_unstable_by(keep, order);
            cands.truncate(keep);
        }
        cands.sort_by(order);

        let mut chosen: Vec<(f64, usize, usize)> = Vec::with_capacity(width);
        for (rank, &(score, bi, t)) in cands.iter().enumerate() {
            if t == EOS {
                if rank < width {
                    let mut ids = alive[bi].ids.clone();
                    ids.push(EOS);
                    finished.push((ids, score));
                }
            } else if chosen.len() < width {
                chosen.push((score, bi, t));
            }
            if chosen.len() == width && rank + 1 >= width {
                break;
            }
        }

        let at_limit = alive[0].ids.len() + 1 >= l;
        let mut next_alive = Vec::with_capacity(chosen.len());
        for (score, bi, t) in chosen {
            let mut ids = alive[bi].ids.clone();
            ids.push(t);
            if at_limit {
                finished.push((ids, score));
                continue;
            }
            let mut state = alive[bi].state.clone();
            let next = stepper.step(&mut state, t);
            next_alive.push(Hyp { ids, score, state, next });
        }
        alive = next_alive;

        let best_finished = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if best_finished >= best_alive {
            break;
        }
    }

    // First-found wins among equal scores.
    let mut best = 0;
    for (i, f) in finished.iter().enumerate() {
        if f.1 > finished[best].1 {
            best = i;
        }
    }
    finished.swap_remove(best).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode, ModelConfig};

    fn micro(arch: Architecture) -> ModelParams {
        let cfg = ModelConfig {
            architecture: arch,
            d_tok: 8,
            layers: 1,
            heads: 2,
            hidden: 6,
            embed_dim: 5,
            max_len: 7,
            vocab_size: 15,
        };
        ModelParams::init(&cfg, 4).unwrap()
    }

    #[test]
    fn beam_one_matches_greedy() {
        for arch in [Architecture::TinyTransformer, Architecture::RecurrentBaseline] {
            let p = micro(arch);
            for k in 0..8 {
                let x = crate::model::tests::seq(&[5 + k, 6 + k % 3, 7], 7);
                let z = encode(&x, &p).unwrap();
                let g = decode(&z, &p, DecodeStrategy::Greedy).unwrap();
                let b = decode(&z, &p, DecodeStrategy::Beam(1)).unwrap();
                assert_eq!(g, b);
                assert_eq!(g.ids.len(), 7);
                assert_eq!(g.ids[0], BOS);
                assert!(g.ids[1..].iter().all(|&t| t != BOS && t != MASK));
            }
        }
    }

    #[test]
    fn rejects_wrong_latent_shape() {
        let p = micro(Architecture::TinyTransformer);
        assert!(decode(&LatentVector::zeros(1, 3), &p, DecodeStrategy::Greedy).is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("greedy".parse::<DecodeStrategy>().unwrap(), DecodeStrategy::Greedy);
        assert_eq!("10".parse::<DecodeStrategy>().unwrap(), DecodeStrategy::Beam(10));
        assert!("0".parse::<DecodeStrategy>().is_err());
    }

    #[test]
    fn incremental_steps_match_teacher_forcing() {
        for arch in [Architecture::TinyTransformer, Architecture::RecurrentBaseline] {
            let p = micro(arch);
            let x = crate::model::tests::seq(&[6, 11, 7, 9], 7);
            let z = encode(&x, &p).unwrap();
            let full = crate::model::teacher_forced_logits(&z, &x, &p).unwrap();
            let s = stepper(&z, &p).unwrap();
            let mut st = s.start();
            for t in 0..6 {
                let inc = s.step(&mut st, x.ids[t]);
                let reference = log_softmax(full.row(t));
                for (a, b) in inc.iter().zip(&reference) {
                    assert!((a - b).abs() < 1e-10, "{arch:?} position {t}: {a} vs {b}");
                }
            }
        }
    }
}
