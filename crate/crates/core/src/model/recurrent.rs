//! Single-layer LSTM encoder/decoder. Gate layout along the `4H` axis is
//! input, forget, cell candidate, output.

use super::tape::{Tape, Var};
use super::tensor::{add_row_product, sigmoid, Matrix};
use super::{Bound, Init, ModelConfig, ModelParams, ParamSpec, TokenSequence};

const EMBED_STD: f64 = 0.2;
const FORGET_BIAS: f64 = 1.0;

pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (e, h, v) = (cfg.embed_dim, cfg.hidden, cfg.vocab_size);
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let mut specs = vec![ParamSpec::new("emb", v, e, Init::Normal(EMBED_STD))];
    for p in ["enc", "dec"] {
        specs.push(ParamSpec::new(format!("{p}.wx"), e, 4 * h, lin(e)));
        specs.push(ParamSpec::new(format!("{p}.wh"), h, 4 * h, lin(h)));
        specs.push(ParamSpec::new(format!("{p}.b"), 1, 4 * h, Init::Zeros));
    }
    specs.push(ParamSpec::new("out.w", h, v, lin(h)));
    specs.push(ParamSpec::new("out.b", 1, v, Init::Zeros));
    specs
}

/// Forget-gate biases start at one so early gradients survive the sequence.
pub(crate) fn adjust_init(params: &mut ModelParams) {
    let h = params.config.hidden;
    for p in ["enc.b", "dec.b"] {
        let i = params.idx(p);
        params.tensors[i].data[h..2 * h].iter_mut().for_each(|v| *v = FORGET_BIAS);
    }
}

fn cell(tape: &mut Tape, b: &Bound<'_>, p: &str, x: Var, h: Var, c: Var) -> (Var, Var) {
    let hidden = b.params.config.hidden;
    let gx = tape.matmul(x, b.v(&format!("{p}.wx")));
    let gh = tape.matmul(h, b.v(&format!("{p}.wh")));
    let g = tape.add(gx, gh);
    let g = tape.add_row(g, b.v(&format!("{p}.b")));
    let i = tape.slice_cols(g, 0, hidden);
    let f = tape.slice_cols(g, hidden, hidden);
    let cand = tape.slice_cols(g, 2 * hidden, hidden);
    let o = tape.slice_cols(g, 3 * hidden, hidden);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let cand = tape.tanh(cand);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c);
    let write = tape.mul(i, cand);
    let c = tape.add(keep, write);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    (h, c)
}

/// Reads all `max_len` positions back to front, pads first, so the words the
/// decoder emits first were read last.
pub(crate) fn encode(tape: &mut Tape, b: &Bound<'_>, batch: &[&TokenSequence]) -> Var {
    let cfg = &b.params.config;
    let zero = Matrix::zeros(batch.len(), cfg.hidden);
    let mut h = tape.constant(zero.clone());
    let mut c = tape.constant(zero);
    for t in (0..cfg.max_len).rev() {
        let ids: Vec<usize> = batch.iter().map(|s| s.ids[t]).collect();
        let x = tape.embedding(b.v("emb"), &ids);
        (h, c) = cell(tape, b, "enc", x, h, c);
    }
    tape.concat_cols(&[h, c])
}

pub(crate) fn decode_logits(tape: &mut Tape, b: &Bound<'_>, latent: Var, targets: &[&TokenSequence]) -> Var {
    let cfg = &b.params.config;
    let mut h = tape.slice_cols(latent, 0, cfg.hidden);
    let mut c = tape.slice_cols(latent, cfg.hidden, cfg.hidden);
    let mut steps = Vec::with_capacity(cfg.max_len - 1);
    for t in 0..cfg.max_len - 1 {
        let ids: Vec<usize> = targets.iter().map(|s| s.ids[t]).collect();
        let x = tape.embedding(b.v("emb"), &ids);
        (h, c) = cell(tape, b, "dec", x, h, c);
        steps.push(h);
    }
    let hs = tape.interleave_rows(&steps);
    tape.linear(hs, b.v("out.w"), b.v("out.b"))
}

pub(crate) struct Decoder<'a> {
    params: &'a ModelParams,
    init: State,
}

#[derive(Clone)]
pub(crate) struct State {
    h: Vec<f64>,
    c: Vec<f64>,
}

impl<'a> Decoder<'a> {
    pub(crate) fn new(params: &'a ModelParams, latent: &Matrix) -> Self {
        let h = params.config.hidden;
        let flat = &latent.data;
        Decoder {
            params,
            init: State {
                h: flat[..h].to_vec(),
                c: flat[h..2 * h].to_vec(),
            },
        }
    }

    pub(crate) fn start(&self) -> State {
        self.init.clone()
    }

    pub(crate) fn step(&self, state: &mut State, token: usize) -> Vec<f64> {
        let p = self.params;
        let hd = p.config.hidden;
        let mut g = p.get("dec.b").data.clone();
        add_row_product(&mut g, p.get("emb").row(token), p.get("dec.wx"));
        add_row_product(&mut g, &state.h, p.get("dec.wh"));
        for j in 0..hd {
            let i = sigmoid(g[j]);
            let f = sigmoid(g[hd + j]);
            let cand = g[2 * hd + j].tanh();
            let o = sigmoid(g[3 * hd + j]);
            state.c[j] = f * state.c[j] + i * cand;
            state.h[j] = o * state.c[j].tanh();
        }
        let mut logits = p.get("out.b").data.clone();
        add_row_product(&mut logits, &state.h, p.get("out.w"));
        logits
    }
}
