//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in evaluation order,
//! so the backward sweep is a single reverse scan. Attention, layer norm and the
//! softmax cross-entropy are fused ops with hand-written adjoints; everything else
//! is elementwise or a matrix product.

use super::tensor::{gelu, gelu_grad, gemm, sigmoid, Matrix, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shape and masking of one fused multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttentionShape {
    pub heads: usize,
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub causal: bool,
    /// `false` marks a key position (per batch row, flattened) that must be ignored.
    pub key_mask: Option<Vec<bool>>,
}

enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    InterleaveRows(Vec<Var>),
    ClipValue {
        x: Var,
        lo: f64,
        hi: f64,
    },
    ClipNormGroups {
        x: Var,
        c: f64,
        group: usize,
        norms: Vec<f64>,
    },
    ZeroCols {
        x: Var,
        cols: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
        count: usize,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, &[])
    }

    pub fn param(&mut self, index: usize, m: &Matrix) -> Var {
        self.push(m.clone(), Op::Param(index), &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(va.rows, vb.cols);
        gemm(1.0, va, false, vb, false, 0.0, &mut out);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(va.rows, vb.rows);
        gemm(1.0, va, false, vb, true, 0.0, &mut out);
        self.push(out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        super::tensor::add_row_assign(&mut out, self.value(bias));
        self.push(out, Op::AddRow(x, bias), &[x, bias])
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        debug_assert_eq!((va.rows, va.cols), (vb.rows, vb.cols));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = super::tensor::map(self.value(x), gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = super::tensor::map(self.value(x), f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = super::tensor::map(self.value(x), sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows, vx.cols);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..cols {
                let h = (row[j] - mean) * inv;
                xhat.data[r * cols + j] = h;
                out.data[r * cols + j] = h * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Scaled dot-product attention, heads laid out as contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), &shape);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let vx = self.value(x);
        let mut out = Matrix::zeros(vx.rows, width);
        for r in 0..vx.rows {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let vp = self.value(*p);
                out.row_mut(r)[off..off + vp.cols].copy_from_slice(vp.row(r));
                off += vp.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks `T` equally shaped `B × k` parts so that output row `b·T + t` is row
    /// `b` of part `t` (time-major steps to batch-major sequences).
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Var {
        let t = parts.len();
        let (rows, cols) = {
            let v = self.value(parts[0]);
            (v.rows, v.cols)
        };
        let mut out = Matrix::zeros(rows * t, cols);
        for (i, p) in parts.iter().enumerate() {
            let v = self.value(*p);
            debug_assert_eq!((v.rows, v.cols), (rows, cols));
            for b in 0..rows {
                out.row_mut(b * t + i).copy_from_slice(v.row(b));
            }
        }
        self.push(out, Op::InterleaveRows(parts.to_vec()), parts)
    }

    pub fn clip_value(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = super::tensor::map(self.value(x), |v| v.clamp(lo, hi));
        self.push(out, Op::ClipValue { x, lo, hi }, &[x])
    }

    /// Rescales each block of `group` consecutive rows (read as one flat vector) to
    /// ℓ₂ norm at most `c`.
    pub fn clip_norm_groups(&mut self, x: Var, c: f64, group: usize) -> Var {
        let mut out = self.value(x).clone();
        let width = group * out.cols;
        let mut norms = Vec::with_capacity(out.rows / group);
        for block in out.data.chunks_mut(width) {
            let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            if norm > c {
                let s = c / norm;
                block.iter_mut().for_each(|v| *v *= s);
            }
        }
        self.push(out, Op::ClipNormGroups { x, c, group, norms }, &[x])
    }

    pub fn zero_cols(&mut self, x: Var, cols: &[usize]) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for &c in cols {
                row[c] = 0.0;
            }
        }
        self.push(
            out,
            Op::ZeroCols {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        )
    }

    /// Mean token-level cross-entropy over rows with a target; returns a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows, targets.len());
        let mut probs = vl.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            super::tensor::softmax_in_place(row);
            if let Some(t) = *t {
                total -= row[t].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Runs the backward sweep from a scalar node and returns the gradient of every
    /// parameter slot that appeared on the tape (`None` for unused slots).
    pub fn backward(&self, loss: Var, param_count: usize) -> Vec<Option<Matrix>> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut param_grads: Vec<Option<Matrix>> = (0..param_count).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => match &mut param_grads[*p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let vb = self.value(*b);
                        let acc = grad_slot(&mut grads, *a, &self.nodes[a.0].value);
                        gemm(1.0, &g, false, vb, true, 1.0, acc);
                    }
                    if self.nodes[b.0].needs_grad {
                        let va = self.value(*a);
                        let acc = grad_slot(&mut grads, *b, &self.nodes[b.0].value);
                        gemm(1.0, va, true, &g, false, 1.0, acc);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let vb = self.value(*b);
                        let acc = grad_slot(&mut grads, *a, &self.nodes[a.0].value);
                        gemm(1.0, &g, false, vb, false, 1.0, acc);
                    }
                    if self.nodes[b.0].needs_grad {
                        let va = self.value(*a);
                        let acc = grad_slot(&mut grads, *b, &self.nodes[b.0].value);
                        gemm(1.0, &g, true, va, false, 1.0, acc);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::AddRow(x, bias) => {
                    if self.nodes[bias.0].needs_grad {
                        let mut gb = Matrix::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (acc, v) in gb.data.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        self.accumulate(&mut grads, *bias, &gb);
                    }
                    self.accumulate(&mut grads, *x, &g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let ga = zip_map(&g, vb, |d, y| d * y);
                        self.accumulate(&mut grads, *a, &ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = zip_map(&g, va, |d, x| d * x);
                        self.accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Gelu(x) => {
                    let gx = zip_map(&g, self.value(*x), |d, v| d * gelu_grad(v));
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::Tanh(x) => {
                    let gx = zip_map(&g, &node.value, |d, y| d * (1.0 - y * y));
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&g, &node.value, |d, y| d * y * (1.0 - y));
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let cols = g.cols;
                    let gam = &self.value(*gamma).data;
                    if self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad {
                        let mut gg = Matrix::zeros(1, cols);
                        let mut gbeta = Matrix::zeros(1, cols);
                        for r in 0..g.rows {
                            for j in 0..cols {
                                let d = g.data[r * cols + j];
                                gg.data[j] += d * xhat.data[r * cols + j];
                                gbeta.data[j] += d;
                            }
                        }
                        self.accumulate(&mut grads, *gamma, &gg);
                        self.accumulate(&mut grads, *beta, &gbeta);
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut gx = Matrix::zeros(g.rows, cols);
                        let n = cols as f64;
                        for r in 0..g.rows {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..cols {
                                let dh = g.data[r * cols + j] * gam[j];
                                sum_d += dh;
                                sum_dx += dh * xhat.data[r * cols + j];
                            }
                            for j in 0..cols {
                                let dh = g.data[r * cols + j] * gam[j];
                                gx.data[r * cols + j] = inv_std[r] / n
                                    * (n * dh - sum_d - xhat.data[r * cols + j] * sum_dx);
                            }
                        }
                        self.accumulate(&mut grads, *x, &gx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    probs,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        &g,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        shape,
                        probs,
                    );
                    self.accumulate(&mut grads, *q, &gq);
                    self.accumulate(&mut grads, *k, &gk);
                    self.accumulate(&mut grads, *v, &gv);
                }
                Op::Embedding { table, ids } => {
                    let vt = self.value(*table);
                    let acc = grad_slot(&mut grads, *table, vt);
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, d) in acc.row_mut(id).iter_mut().zip(g.row(r)) {
                            *a += d;
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.nodes[x.0].needs_grad {
                        let vx = self.value(*x);
                        let acc = grad_slot(&mut grads, *x, vx);
                        for r in 0..g.rows {
                            for (a, d) in acc.row_mut(r)[*start..*start + g.cols]
                                .iter_mut()
                                .zip(g.row(r))
                            {
                                *a += d;
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let width = self.value(*p).cols;
                        if self.nodes[p.0].needs_grad {
                            let mut gp = Matrix::zeros(g.rows, width);
                            for r in 0..g.rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + width]);
                            }
                            self.accumulate(&mut grads, *p, &gp);
                        }
                        off += width;
                    }
                }
                Op::InterleaveRows(parts) => {
                    let t = parts.len();
                    for (i, p) in parts.iter().enumerate() {
                        if self.nodes[p.0].needs_grad {
                            let mut gp = Matrix::zeros(g.rows / t, g.cols);
                            for b in 0..gp.rows {
                                gp.row_mut(b).copy_from_slice(g.row(b * t + i));
                            }
                            self.accumulate(&mut grads, *p, &gp);
                        }
                    }
                }
                Op::ClipValue { x, lo, hi } => {
                    // Subgradient: pass-through strictly inside the box, zero outside.
                    let gx = zip_map(&g, self.value(*x), |d, v| {
                        if v > *lo && v < *hi {
                            d
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::ClipNormGroups { x, c, group, norms } => {
                    let vx = self.value(*x);
                    let width = group * g.cols;
                    let mut gx = g.clone();
                    for ((gb, xb), &norm) in gx
                        .data
                        .chunks_mut(width)
                        .zip(vx.data.chunks(width))
                        .zip(norms)
                    {
                        if norm > *c {
                            let dot: f64 = xb.iter().zip(gb.iter()).map(|(a, b)| a * b).sum();
                            let s = c / norm;
                            for (gv, xv) in gb.iter_mut().zip(xb) {
                                *gv = s * (*gv - xv * dot / (norm * norm));
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::ZeroCols { x, cols } => {
                    let mut gx = g.clone();
                    for r in 0..gx.rows {
                        let row = gx.row_mut(r);
                        for &c in cols {
                            row[c] = 0.0;
                        }
                    }
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if *count > 0 {
                        let scale = g.data[0] / *count as f64;
                        let mut gl = Matrix::zeros(probs.rows, probs.cols);
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                let row = gl.row_mut(r);
                                row.copy_from_slice(probs.row(r));
                                row[t] -= 1.0;
                                row.iter_mut().for_each(|v| *v *= scale);
                            }
                        }
                        self.accumulate(&mut grads, *logits, &gl);
                    }
                }
            }
        }
        param_grads
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows, like.cols))
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Matrix::from_vec(a.rows, a.cols, data)
}

pub(crate) fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    shape: &AttentionShape,
) -> (Matrix, Vec<f64>) {
    let d = q.cols;
    let dh = d / shape.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, lk) = (shape.query_len, shape.key_len);
    let mut out = Matrix::zeros(q.rows, d);
    let mut probs = vec![0.0; shape.batch * shape.heads * lq * lk];
    let mut scores = vec![0.0; lk];
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &q.row(b * lq + i)[off..off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let allowed = !(shape.causal && j > i)
                        && shape.key_mask.as_ref().map_or(true, |m| m[b * lk + j]);
                    *s = if allowed {
                        let kj = &k.row(b * lk + j)[off..off + dh];
                        qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                super::tensor::softmax_in_place(&mut scores);
                let base = ((b * shape.heads + h) * lq + i) * lk;
                probs[base..base + lk].copy_from_slice(&scores);
                let orow = &mut out.row_mut(b * lq + i)[off..off + dh];
                for (j, &p) in scores.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &v.row(b * lk + j)[off..off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    g: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    shape: &AttentionShape,
    probs: &[f64],
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols;
    let dh = d / shape.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, lk) = (shape.query_len, shape.key_len);
    let mut gq = Matrix::zeros(q.rows, d);
    let mut gk = Matrix::zeros(k.rows, d);
    let mut gv = Matrix::zeros(v.rows, d);
    let mut dp = vec![0.0; lk];
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let off = h * dh;
            for i in 0..lq {
                let base = ((b * shape.heads + h) * lq + i) * lk;
                let p = &probs[base..base + lk];
                let gi = &g.row(b * lq + i)[off..off + dh];
                let mut dot = 0.0;
                for j in 0..lk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &v.row(b * lk + j)[off..off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    dot += dp[j] * p[j];
                    let gvj = &mut gv.row_mut(b * lk + j)[off..off + dh];
                    for (a, x) in gvj.iter_mut().zip(gi) {
                        *a += p[j] * x;
                    }
                }
                let qi: Vec<f64> = q.row(b * lq + i)[off..off + dh].to_vec();
                for j in 0..lk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = &k.row(b * lk + j)[off..off + dh];
                    let gqi = &mut gq.row_mut(b * lq + i)[off..off + dh];
                    for (a, x) in gqi.iter_mut().zip(kj) {
                        *a += ds * x;
                    }
                    let gkj = &mut gk.row_mut(b * lk + j)[off..off + dh];
                    for (a, x) in gkj.iter_mut().zip(&qi) {
                        *a += ds * x;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central differences on every entry of every parameter.
    fn check(params: &mut [Matrix], f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |params: &[Matrix]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
            let loss = f(&mut tape, &vars);
            (tape.value(loss).data[0], tape.backward(loss, params.len()))
        };
        let (_, analytic) = eval(params);
        let h = 1e-6;
        for p in 0..params.len() {
            for e in 0..params[p].len() {
                let orig = params[p].data[e];
                params[p].data[e] = orig + h;
                let (up, _) = eval(params);
                params[p].data[e] = orig - h;
                let (down, _) = eval(params);
                params[p].data[e] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic[p].as_ref().map_or(0.0, |g| g.data[e]);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {p} entry {e}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn attention_and_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = vec![
            random(6, 4, &mut rng),
            random(4, 4, &mut rng),
            random(1, 4, &mut rng),
            random(1, 4, &mut rng),
            random(6, 4, &mut rng),
        ];
        check(&mut params, |t, v| {
            let n = t.layer_norm(v[0], v[2], v[3]);
            let q = t.matmul(n, v[1]);
            let shape = AttentionShape {
                heads: 2,
                batch: 2,
                query_len: 3,
                key_len: 3,
                causal: true,
                key_mask: Some(vec![true, true, false, true, true, true]),
            };
            let a = t.attention(q, v[0], v[4], shape);
            let gl = t.gelu(a);
            t.cross_entropy(gl, &[Some(0), None, Some(3), Some(1), Some(2), Some(0)])
        });
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = vec![random(5, 3, &mut rng), random(3, 3, &mut rng), random(1, 6, &mut rng)];
        check(&mut params, |t, v| {
            let e = t.embedding(v[0], &[4, 1, 1, 0]);
            let a = t.slice_cols(e, 0, 2);
            let b = t.slice_cols(e, 1, 2);
            let s = t.sigmoid(a);
            let th = t.tanh(b);
            let m = t.mul(s, th);
            let c = t.concat_cols(&[m, e, e]);
            let c = t.slice_cols(c, 0, 6);
            let c = t.add_row(c, v[2]);
            let c = t.clip_norm_groups(c, 1.2, 2);
            let z = t.zero_cols(c, &[1]);
            t.cross_entropy(z, &[Some(0), Some(5), Some(2), None])
        });
    }

    #[test]
    fn transposed_product_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = vec![random(3, 4, &mut rng), random(5, 4, &mut rng)];
        check(&mut params, |t, v| {
            let p = t.matmul_nt(v[0], v[1]);
            let a = t.slice_cols(p, 0, 2);
            let b = t.slice_cols(p, 2, 2);
            let p = t.interleave_rows(&[a, b, a]);
            let p = t.concat_cols(&[p, p]);
            t.cross_entropy(p, &[Some(3), Some(0), Some(2), None, Some(1), Some(2), Some(0), Some(3), Some(1)])
        });
    }
}
