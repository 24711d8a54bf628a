//! Pre-norm transformer encoder/decoder with tied input/output embeddings.

use super::tape::{AttentionShape, Tape, Var};
use super::tensor::{gelu, layer_norm, linear, linear_row, softmax_in_place, Matrix};
use super::{Bound, Init, ModelConfig, ModelParams, ParamSpec, TokenSequence, PAD};

const FFN_MULT: usize = 4;
/// Initial gain of the encoder's final layer norm, which sets the spread of
/// latent values before training moves it.
const LATENT_GAIN: f64 = 0.2;
const EMBED_STD: f64 = 0.2;

pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_tok;
    let f = FFN_MULT * d;
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let resid = |fan_in: usize| Init::Normal(1.0 / ((fan_in * 2 * cfg.layers) as f64).sqrt());
    let mut specs = vec![
        ParamSpec::new("tok_emb", cfg.vocab_size, d, Init::Normal(EMBED_STD)),
        ParamSpec::new("pos_emb", cfg.max_len, d, Init::Normal(EMBED_STD)),
    ];
    let norm = |specs: &mut Vec<ParamSpec>, p: &str, gain: f64| {
        specs.push(ParamSpec::new(format!("{p}.g"), 1, d, Init::Const(gain)));
        specs.push(ParamSpec::new(format!("{p}.b"), 1, d, Init::Zeros));
    };
    let ffn = |specs: &mut Vec<ParamSpec>, p: &str| {
        specs.push(ParamSpec::new(format!("{p}.w1"), d, f, lin(d)));
        specs.push(ParamSpec::new(format!("{p}.b1"), 1, f, Init::Zeros));
        specs.push(ParamSpec::new(format!("{p}.w2"), f, d, resid(f)));
        specs.push(ParamSpec::new(format!("{p}.b2"), 1, d, Init::Zeros));
    };
    for i in 0..cfg.layers {
        let p = format!("enc.{i}");
        norm(&mut specs, &format!("{p}.ln1"), 1.0);
        specs.push(ParamSpec::new(format!("{p}.attn.wqkv"), d, 3 * d, lin(d)));
        specs.push(ParamSpec::new(format!("{p}.attn.bqkv"), 1, 3 * d, Init::Zeros));
        specs.push(ParamSpec::new(format!("{p}.attn.wo"), d, d, resid(d)));
        specs.push(ParamSpec::new(format!("{p}.attn.bo"), 1, d, Init::Zeros));
        norm(&mut specs, &format!("{p}.ln2"), 1.0);
        ffn(&mut specs, &format!("{p}.ffn"));
    }
    norm(&mut specs, "enc.ln_f", LATENT_GAIN);
    for i in 0..cfg.layers {
        let p = format!("dec.{i}");
        norm(&mut specs, &format!("{p}.ln1"), 1.0);
        specs.push(ParamSpec::new(format!("{p}.self.wqkv"), d, 3 * d, lin(d)));
        specs.push(ParamSpec::new(format!("{p}.self.bqkv"), 1, 3 * d, Init::Zeros));
        specs.push(ParamSpec::new(format!("{p}.self.wo"), d, d, resid(d)));
        specs.push(ParamSpec::new(format!("{p}.self.bo"), 1, d, Init::Zeros));
        norm(&mut specs, &format!("{p}.ln2"), 1.0);
        specs.push(ParamSpec::new(format!("{p}.cross.wq"), d, d, lin(d)));
        specs.push(ParamSpec::new(format!("{p}.cross.bq"), 1, d, Init::Zeros));
        // Keys and values read the (pruned / clipped / noised) latent, which is
        // small in magnitude; scale their initialisation up to match.
        specs.push(ParamSpec::new(format!("{p}.cross.wk"), d, d, Init::Normal(1.0 / (LATENT_GAIN * (d as f64).sqrt()))));
        specs.push(ParamSpec::new(format!("{p}.cross.bk"), 1, d, Init::Zeros));
        specs.push(ParamSpec::new(format!("{p}.cross.wv"), d, d, Init::Normal(1.0 / (LATENT_GAIN * (d as f64).sqrt()))));
        specs.push(ParamSpec::new(format!("{p}.cross.bv"), 1, d, Init::Zeros));
        specs.push(ParamSpec::new(format!("{p}.cross.wo"), d, d, resid(d)));
        specs.push(ParamSpec::new(format!("{p}.cross.bo"), 1, d, Init::Zeros));
        norm(&mut specs, &format!("{p}.ln3"), 1.0);
        ffn(&mut specs, &format!("{p}.ffn"));
    }
    norm(&mut specs, "dec.ln_f", 1.0);
    specs.push(ParamSpec::new("out.b", 1, cfg.vocab_size, Init::Zeros));
    specs
}

fn embed(tape: &mut Tape, b: &Bound<'_>, ids: &[usize], len: usize) -> Var {
    let tok = tape.embedding(b.v("tok_emb"), ids);
    let positions: Vec<usize> = (0..ids.len()).map(|i| i % len).collect();
    let pos = tape.embedding(b.v("pos_emb"), &positions);
    tape.add(tok, pos)
}

fn ffn(tape: &mut Tape, b: &Bound<'_>, p: &str, x: Var) -> Var {
    let h = tape.linear(x, b.v(&format!("{p}.w1")), b.v(&format!("{p}.b1")));
    let h = tape.gelu(h);
    tape.linear(h, b.v(&format!("{p}.w2")), b.v(&format!("{p}.b2")))
}

fn norm(tape: &mut Tape, b: &Bound<'_>, p: &str, x: Var) -> Var {
    tape.layer_norm(x, b.v(&format!("{p}.g")), b.v(&format!("{p}.b")))
}

fn self_attention(tape: &mut Tape, b: &Bound<'_>, p: &str, x: Var, shape: AttentionShape) -> Var {
    let d = tape.value(x).cols;
    let qkv = tape.linear(x, b.v(&format!("{p}.wqkv")), b.v(&format!("{p}.bqkv")));
    let q = tape.slice_cols(qkv, 0, d);
    let k = tape.slice_cols(qkv, d, d);
    let v = tape.slice_cols(qkv, 2 * d, d);
    let o = tape.attention(q, k, v, shape);
    tape.linear(o, b.v(&format!("{p}.wo")), b.v(&format!("{p}.bo")))
}

pub(crate) fn encode(tape: &mut Tape, b: &Bound<'_>, batch: &[&TokenSequence]) -> Var {
    let cfg = &b.params.config;
    let l = cfg.max_len;
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let key_mask: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
    let mut x = embed(tape, b, &ids, l);
    for i in 0..cfg.layers {
        let p = format!("enc.{i}");
        let h = norm(tape, b, &format!("{p}.ln1"), x);
        let shape = AttentionShape {
            heads: cfg.heads,
            batch: batch.len(),
            query_len: l,
            key_len: l,
            causal: false,
            key_mask: Some(key_mask.clone()),
        };
        let a = self_attention(tape, b, &format!("{p}.attn"), h, shape);
        x = tape.add(x, a);
        let h = norm(tape, b, &format!("{p}.ln2"), x);
        let f = ffn(tape, b, &format!("{p}.ffn"), h);
        x = tape.add(x, f);
    }
    norm(tape, b, "enc.ln_f", x)
}

pub(crate) fn decode_logits(tape: &mut Tape, b: &Bound<'_>, latent: Var, targets: &[&TokenSequence]) -> Var {
    let cfg = &b.params.config;
    let l = cfg.max_len;
    let lq = l - 1;
    let ids: Vec<usize> = targets.iter().flat_map(|s| s.ids[..lq].iter().copied()).collect();
    let mut y = embed(tape, b, &ids, lq);
    for i in 0..cfg.layers {
        let p = format!("dec.{i}");
        let h = norm(tape, b, &format!("{p}.ln1"), y);
        let shape = AttentionShape {
            heads: cfg.heads,
            batch: targets.len(),
            query_len: lq,
            key_len: lq,
            causal: true,
            key_mask: None,
        };
        let a = self_attention(tape, b, &format!("{p}.self"), h, shape);
        y = tape.add(y, a);

        let h = norm(tape, b, &format!("{p}.ln2"), y);
        let q = tape.linear(h, b.v(&format!("{p}.cross.wq")), b.v(&format!("{p}.cross.bq")));
        let k = tape.linear(latent, b.v(&format!("{p}.cross.wk")), b.v(&format!("{p}.cross.bk")));
        let v = tape.linear(latent, b.v(&format!("{p}.cross.wv")), b.v(&format!("{p}.cross.bv")));
        let shape = AttentionShape {
            heads: cfg.heads,
            batch: targets.len(),
            query_len: lq,
            key_len: l,
            causal: false,
            key_mask: None,
        };
        let o = tape.attention(q, k, v, shape);
        let o = tape.linear(o, b.v(&format!("{p}.cross.wo")), b.v(&format!("{p}.cross.bo")));
        y = tape.add(y, o);

        let h = norm(tape, b, &format!("{p}.ln3"), y);
        let f = ffn(tape, b, &format!("{p}.ffn"), h);
        y = tape.add(y, f);
    }
    let h = norm(tape, b, "dec.ln_f", y);
    let logits = tape.matmul_nt(h, b.v("tok_emb"));
    tape.add_row(logits, b.v("out.b"))
}

/// Incremental decoder with cached keys and values, for generation.
pub(crate) struct Decoder<'a> {
    params: &'a ModelParams,
    layers: Vec<[&'a Matrix; LAYER_TENSORS.len()]>,
    cross_k: Vec<Matrix>,
    cross_v: Vec<Matrix>,
}

/// Per-layer tensors `Decoder::step` reads, looked up once per latent.
const LAYER_TENSORS: [&str; 18] = [
    "ln1.g", "ln1.b", "self.wqkv", "self.bqkv", "self.wo", "self.bo",
    "ln2.g", "ln2.b", "cross.wq", "cross.bq", "cross.wo", "cross.bo",
    "ln3.g", "ln3.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

#[derive(Clone)]
pub(crate) struct State {
    pos: usize,
    self_k: Vec<Matrix>,
    self_v: Vec<Matrix>,
}

impl<'a> Decoder<'a> {
    pub(crate) fn new(params: &'a ModelParams, latent: &Matrix) -> Self {
        let layers = params.config.layers;
        let mut cross_k = Vec::with_capacity(layers);
        let mut cross_v = Vec::with_capacity(layers);
        for i in 0..layers {
            let g = |n: &str| params.get(&format!("dec.{i}.cross.{n}"));
            cross_k.push(linear(latent, g("wk"), g("bk")));
            cross_v.push(linear(latent, g("wv"), g("bv")));
        }
        let layers = (0..layers)
            .map(|i| LAYER_TENSORS.map(|n| params.get(&format!("dec.{i}.{n}"))))
            .collect();
        Decoder {
            params,
            layers,
            cross_k,
            cross_v,
        }
    }

    pub(crate) fn start(&self) -> State {
        let d = self.params.config.d_tok;
        let layers = self.params.config.layers;
        State {
            pos: 0,
            self_k: vec![Matrix::zeros(0, d); layers],
            self_v: vec![Matrix::zeros(0, d); layers],
        }
    }

    /// Feeds `token` at the next position and returns the logits for the one after.
    pub(crate) fn step(&self, state: &mut State, token: usize) -> Vec<f64> {
        let p = self.params;
        let cfg = &p.config;
        let d = cfg.d_tok;
        let mut x = Matrix::from_vec(1, d, p.get("tok_emb").row(token).to_vec());
        for (v, e) in x.data.iter_mut().zip(p.get("pos_emb").row(state.pos)) {
            *v += e;
        }
        let add = |x: &mut Matrix, o: Vec<f64>| x.data.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        for (i, w) in self.layers.iter().enumerate() {
            let [ln1g, ln1b, wqkv, bqkv, swo, sbo, ln2g, ln2b, cwq, cbq, cwo, cbo, ln3g, ln3b, w1, b1, w2, b2] = *w;
            let h = layer_norm(&x, ln1g, ln1b);
            let qkv = linear_row(&h.data, wqkv, bqkv);
            let sk = &mut state.self_k[i];
            sk.data.extend_from_slice(&qkv[d..2 * d]);
            sk.rows += 1;
            let sv = &mut state.self_v[i];
            sv.data.extend_from_slice(&qkv[2 * d..3 * d]);
            sv.rows += 1;
            let o = attend(&qkv[..d], &state.self_k[i], &state.self_v[i], cfg.heads);
            add(&mut x, linear_row(&o, swo, sbo));

            let h = layer_norm(&x, ln2g, ln2b);
            let q = linear_row(&h.data, cwq, cbq);
            let o = attend(&q, &self.cross_k[i], &self.cross_v[i], cfg.heads);
            add(&mut x, linear_row(&o, cwo, cbo));

            let h = layer_norm(&x, ln3g, ln3b);
            let f: Vec<f64> = linear_row(&h.data, w1, b1).into_iter().map(gelu).collect();
            add(&mut x, linear_row(&f, w2, b2));
        }
        state.pos += 1;
        let h = layer_norm(&x, p.get("dec.ln_f.g"), p.get("dec.ln_f.b"));
        let emb = p.get("tok_emb");
        (0..cfg.vocab_size)
            .zip(&p.get("out.b").data)
            .map(|(v, b)| h.data.iter().zip(emb.row(v)).map(|(a, e)| a * e).sum::<f64>() + b)
            .collect()
    }
}

/// Single-query multi-head attention over cached keys and values.
fn attend(q: &[f64], keys: &Matrix, values: &Matrix, heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; keys.rows];
    for h in 0..heads {
        let off = h * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &keys.row(j)[off..off + dh];
            *s = q[off..off + dh].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(&mut scores);
        for (j, &pj) in scores.iter().enumerate() {
            let v = &values.row(j)[off..off + dh];
            for (o, x) in out[off..off + dh].iter_mut().zip(v) {
                *o += pj * x;
            }
        }
    }
    out
}
