//! A small post-norm transformer encoder with hand-written gradients.
//!
//! Every layer computes
//!
//! ```text
//! A_i  = Q_i K_iᵀ / sqrt(d_k)                  (per head, pre-softmax)
//! C    = concat_i(softmax(A_i) V_i) W_o + b_o
//! Y1   = LayerNorm(X + C)
//! F    = max(0, Y1 W_1 + b_1) W_2 + b_2
//! H    = LayerNorm(Y1 + F)
//! ```
//!
//! The scaled scores `A_i` and the layer outputs `H` are kept for
//! distillation. All arithmetic is `f64` and there is no dropout.
//!
//! Layers are numbered from 1 in the public accessors; layer 0 denotes the
//! embedding output.

pub mod linalg;
mod snapshot;

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use linalg::{add_bias, col_sum_acc, dot, matmul, matmul_acc, matmul_nt, matmul_nt_acc, matmul_tn_acc, softmax_rows};
pub use snapshot::{read_snapshot, write_snapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

const LN_EPS: f64 = 1e-12;
const MASK_PENALTY: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid transformer config: {0}")]
    Config(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {0} has no position with non-zero input and output norms")]
    DegenerateContribution(usize),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("layers", self.layers),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            } else if v > u32::MAX as usize {
                problems.push(format!("{name} does not fit in 32 bits"));
            }
        }
        if self.heads > 0 && self.hidden_size % self.heads != 0 {
            problems.push(format!("hidden_size {} is not divisible by heads {}", self.hidden_size, self.heads));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    Attention,
    FeedForward,
    LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
    init: Init,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

/// Parameter layout: every tensor lives in one flat buffer, in declaration
/// order.
#[derive(Debug, Clone)]
pub struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    emb_ln_g: usize,
    emb_ln_b: usize,
    layers: Vec<LayerOffsets>,
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    fn new(c: &TransformerConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, rows: usize, cols: usize, group: ParamGroup, init: Init| {
            let offset = total;
            tensors.push(TensorSpec { name, offset, rows, cols, group, init });
            total += rows * cols;
            offset
        };
        let (d, di) = (c.hidden_size, c.ffn_size);
        let tok_emb = push("embeddings.token".into(), c.vocab_size, d, ParamGroup::Embedding, Init::Normal);
        let pos_emb = push("embeddings.position".into(), c.max_seq_len, d, ParamGroup::Embedding, Init::Normal);
        let emb_ln_g = push("embeddings.ln.gain".into(), 1, d, ParamGroup::LayerNorm, Init::One);
        let emb_ln_b = push("embeddings.ln.bias".into(), 1, d, ParamGroup::LayerNorm, Init::Zero);
        let layers = (0..c.layers)
            .map(|l| {
                let mut p = |n: &str, rows, cols, group, init| push(format!("layer{}.{n}", l + 1), rows, cols, group, init);
                use ParamGroup::{Attention as A, FeedForward as F, LayerNorm as N};
                LayerOffsets {
                    wq: p("attn.wq", d, d, A, Init::Normal),
                    bq: p("attn.bq", 1, d, A, Init::Zero),
                    wk: p("attn.wk", d, d, A, Init::Normal),
                    bk: p("attn.bk", 1, d, A, Init::Zero),
                    wv: p("attn.wv", d, d, A, Init::Normal),
                    bv: p("attn.bv", 1, d, A, Init::Zero),
                    wo: p("attn.wo", d, d, A, Init::Normal),
                    bo: p("attn.bo", 1, d, A, Init::Zero),
                    ln1_g: p("ln1.gain", 1, d, N, Init::One),
                    ln1_b: p("ln1.bias", 1, d, N, Init::Zero),
                    w1: p("ffn.w1", d, di, F, Init::Normal),
                    b1: p("ffn.b1", 1, di, F, Init::Zero),
                    w2: p("ffn.w2", di, d, F, Init::Normal),
                    b2: p("ffn.b2", 1, d, F, Init::Zero),
                    ln2_g: p("ln2.gain", 1, d, N, Init::One),
                    ln2_b: p("ln2.bias", 1, d, N, Init::Zero),
                }
            })
            .collect();
        Self { tok_emb, pos_emb, emb_ln_g, emb_ln_b, layers, tensors, total }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Truncated normal (two standard deviations) initializer.
pub fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: TransformerConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl Encoder {
    /// Random weights: truncated normal (std 0.02) matrices, zero biases,
    /// unit layer-norm gains.
    pub fn new(config: TransformerConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; layout.total];
        for t in &layout.tensors {
            for v in &mut params[t.range()] {
                *v = match t.init {
                    Init::Normal => truncated_normal(&mut rng, 0.02),
                    Init::Zero => 0.0,
                    Init::One => 1.0,
                };
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: TransformerConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::Shape(format!("{} parameters, expected {}", params.len(), layout.total)));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.tensor(name)?.range();
        Some(&mut self.params[range])
    }

    fn check_input(&self, tokens: &[u32], mask: Option<&[bool]>) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { token, vocab: self.config.vocab_size });
        }
        if let Some(mask) = mask {
            if mask.len() != tokens.len() {
                return Err(ModelError::Shape(format!("mask length {} != sequence length {}", mask.len(), tokens.len())));
            }
        }
        Ok(())
    }

    /// Runs one sequence. `mask[j] == false` hides key position `j` from
    /// every query.
    pub fn forward(&self, tokens: &[u32], mask: Option<&[bool]>) -> Result<Forward, ModelError> {
        self.check_input(tokens, mask)?;
        let c = &self.config;
        let (len, d, di, h, dk) = (tokens.len(), c.hidden_size, c.ffn_size, c.heads, c.head_dim());
        let p = &self.params;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut emb_in = vec![0.0; len * d];
        for (i, &t) in tokens.iter().enumerate() {
            let tok = &p[self.layout.tok_emb + t as usize * d..][..d];
            let pos = &p[self.layout.pos_emb + i * d..][..d];
            for (x, (a, b)) in emb_in[i * d..(i + 1) * d].iter_mut().zip(tok.iter().zip(pos)) {
                *x = a + b;
            }
        }
        let emb = LnCache::forward(&emb_in, &p[self.layout.emb_ln_g..][..d], &p[self.layout.emb_ln_b..][..d], d);

        let mut layers: Vec<LayerCache> = Vec::with_capacity(c.layers);
        for off in &self.layout.layers {
            let x = layers.last().map_or(&emb.out, |l| &l.ln2.out);
            let proj = |w: usize, b: usize| {
                let mut out = vec![0.0; len * d];
                matmul(x, &p[w..][..d * d], &mut out, len, d, d);
                add_bias(&mut out, &p[b..][..d]);
                out
            };
            let (q, k, v) = (proj(off.wq, off.bq), proj(off.wk, off.bk), proj(off.wv, off.bv));

            let mut scores = vec![0.0; h * len * len];
            let mut probs = vec![0.0; h * len * len];
            let mut ctx = vec![0.0; len * d];
            for head in 0..h {
                let hs = head * dk;
                let s = &mut scores[head * len * len..(head + 1) * len * len];
                for i in 0..len {
                    let qi = &q[i * d + hs..i * d + hs + dk];
                    for j in 0..len {
                        s[i * len + j] = dot(qi, &k[j * d + hs..j * d + hs + dk]) * scale;
                    }
                }
                let pr = &mut probs[head * len * len..(head + 1) * len * len];
                pr.copy_from_slice(s);
                if let Some(mask) = mask {
                    for row in pr.chunks_mut(len) {
                        for (v, &keep) in row.iter_mut().zip(mask) {
                            if !keep {
                                *v += MASK_PENALTY;
                            }
                        }
                    }
                }
                softmax_rows(pr, len);
                for i in 0..len {
                    let ci = &mut ctx[i * d + hs..i * d + hs + dk];
                    for j in 0..len {
                        let w = pr[i * len + j];
                        for (cv, vv) in ci.iter_mut().zip(&v[j * d + hs..j * d + hs + dk]) {
                            *cv += w * vv;
                        }
                    }
                }
            }

            let mut r1 = x.clone();
            matmul_acc(&ctx, &p[off.wo..][..d * d], &mut r1, len, d, d);
            add_bias(&mut r1, &p[off.bo..][..d]);
            let ln1 = LnCache::forward(&r1, &p[off.ln1_g..][..d], &p[off.ln1_b..][..d], d);

            let mut f_pre = vec![0.0; len * di];
            matmul(&ln1.out, &p[off.w1..][..d * di], &mut f_pre, len, d, di);
            add_bias(&mut f_pre, &p[off.b1..][..di]);
            let f_act: Vec<f64> = f_pre.iter().map(|&v| v.max(0.0)).collect();
            let mut r2 = ln1.out.clone();
            matmul_acc(&f_act, &p[off.w2..][..di * d], &mut r2, len, di, d);
            add_bias(&mut r2, &p[off.b2..][..d]);
            let ln2 = LnCache::forward(&r2, &p[off.ln2_g..][..d], &p[off.ln2_b..][..d], d);

            layers.push(LayerCache { q, k, v, scores, probs, ctx, ln1, f_pre, f_act, ln2 });
        }
        Ok(Forward {
            tokens: tokens.to_vec(),
            len,
            hidden_size: d,
            heads: h,
            emb,
            layers,
        })
    }

    /// Accumulates into `grad` (same layout as the parameters) the gradient
    /// of a scalar loss whose partial derivatives with respect to the
    /// retained activations are given in `upstream`.
    pub fn backward(&self, fwd: &Forward, upstream: &ActivationGrads, grad: &mut [f64]) -> Result<(), ModelError> {
        let c = &self.config;
        let (len, d, di, h, dk) = (fwd.len, c.hidden_size, c.ffn_size, c.heads, c.head_dim());
        if fwd.layers.len() != c.layers || fwd.hidden_size != d || fwd.heads != h {
            return Err(ModelError::Shape("forward pass came from a different architecture".into()));
        }
        if grad.len() != self.params.len() {
            return Err(ModelError::Shape(format!("gradient buffer has {} entries, expected {}", grad.len(), self.params.len())));
        }
        upstream.check(c.layers, len, d, h)?;
        let p = &self.params;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut dy = vec![0.0; len * d];
        if let Some(top) = &upstream.hidden[c.layers] {
            dy.copy_from_slice(top);
        }
        for (l, (off, cache)) in self.layout.layers.iter().zip(&fwd.layers).enumerate().rev() {
            let x = if l == 0 { &fwd.emb.out } else { &fwd.layers[l - 1].ln2.out };

            let dr2 = ln_backward(&dy, &cache.ln2, &p[off.ln2_g..][..d], grad, off.ln2_g, off.ln2_b, d);

            col_sum_acc(&dr2, &mut grad[off.b2..off.b2 + d]);
            matmul_tn_acc(&cache.f_act, &dr2, &mut grad[off.w2..off.w2 + di * d], len, di, d);
            let mut d_f = vec![0.0; len * di];
            matmul_nt(&dr2, &p[off.w2..][..di * d], &mut d_f, len, d, di);
            for (g, &pre) in d_f.iter_mut().zip(&cache.f_pre) {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            }
            col_sum_acc(&d_f, &mut grad[off.b1..off.b1 + di]);
            matmul_tn_acc(&cache.ln1.out, &d_f, &mut grad[off.w1..off.w1 + d * di], len, d, di);
            let mut dy1 = dr2;
            matmul_nt_acc(&d_f, &p[off.w1..][..d * di], &mut dy1, len, di, d);

            let dr1 = ln_backward(&dy1, &cache.ln1, &p[off.ln1_g..][..d], grad, off.ln1_g, off.ln1_b, d);

            col_sum_acc(&dr1, &mut grad[off.bo..off.bo + d]);
            matmul_tn_acc(&cache.ctx, &dr1, &mut grad[off.wo..off.wo + d * d], len, d, d);
            let mut d_ctx = vec![0.0; len * d];
            matmul_nt(&dr1, &p[off.wo..][..d * d], &mut d_ctx, len, d, d);

            let mut dq = vec![0.0; len * d];
            let mut dk_ = vec![0.0; len * d];
            let mut dv = vec![0.0; len * d];
            let ext_scores = upstream.scores[l + 1].as_deref();
            let mut d_p = vec![0.0; len];
            for head in 0..h {
                let hs = head * dk;
                let pr = &cache.probs[head * len * len..(head + 1) * len * len];
                for i in 0..len {
                    let dci = &d_ctx[i * d + hs..i * d + hs + dk];
                    let prow = &pr[i * len..(i + 1) * len];
                    for j in 0..len {
                        let vj = &cache.v[j * d + hs..j * d + hs + dk];
                        d_p[j] = dot(dci, vj);
                        let w = prow[j];
                        for (g, &dc) in dv[j * d + hs..j * d + hs + dk].iter_mut().zip(dci) {
                            *g += w * dc;
                        }
                    }
                    let weighted: f64 = prow.iter().zip(&d_p).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        let mut ds = prow[j] * (d_p[j] - weighted);
                        if let Some(ext) = ext_scores {
                            ds += ext[head * len * len + i * len + j];
                        }
                        if ds == 0.0 {
                            continue;
                        }
                        let ds = ds * scale;
                        let (qi, kj) = (i * d + hs, j * d + hs);
                        for t in 0..dk {
                            dq[qi + t] += ds * cache.k[kj + t];
                            dk_[kj + t] += ds * cache.q[qi + t];
                        }
                    }
                }
            }

            let mut dx = dr1;
            for (dproj, w, b) in [(&dq, off.wq, off.bq), (&dk_, off.wk, off.bk), (&dv, off.wv, off.bv)] {
                col_sum_acc(dproj, &mut grad[b..b + d]);
                matmul_tn_acc(x, dproj, &mut grad[w..w + d * d], len, d, d);
                matmul_nt_acc(dproj, &p[w..][..d * d], &mut dx, len, d, d);
            }
            if let Some(ext) = &upstream.hidden[l] {
                for (a, b) in dx.iter_mut().zip(ext) {
                    *a += b;
                }
            }
            dy = dx;
        }

        let de = ln_backward(&dy, &fwd.emb, &p[self.layout.emb_ln_g..][..d], grad, self.layout.emb_ln_g, self.layout.emb_ln_b, d);
        for (i, &t) in fwd.tokens.iter().enumerate() {
            let row = &de[i * d..(i + 1) * d];
            let tok = self.layout.tok_emb + t as usize * d;
            let pos = self.layout.pos_emb + i * d;
            for (j, &g) in row.iter().enumerate() {
                grad[tok + j] += g;
                grad[pos + j] += g;
            }
        }
        Ok(())
    }

    /// Mean cosine similarity between each layer's input and output hidden
    /// vectors over every position of `sequences`. Low values mark layers
    /// that change their input the most.
    pub fn layer_contribution(&self, sequences: &[Vec<u32>]) -> Result<Vec<f64>, ModelError> {
        if sequences.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let d = self.config.hidden_size;
        let mut sums = vec![0.0; self.config.layers];
        let mut counts = vec![0usize; self.config.layers];
        for seq in sequences {
            let fwd = self.forward(seq, None)?;
            for l in 0..self.config.layers {
                let (input, output) = (fwd.hidden(l), fwd.hidden(l + 1));
                for (a, b) in input.chunks(d).zip(output.chunks(d)) {
                    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    sums[l] += (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
                    counts[l] += 1;
                }
            }
        }
        sums.iter()
            .zip(&counts)
            .enumerate()
            .map(|(l, (&s, &n))| if n == 0 { Err(ModelError::DegenerateContribution(l + 1)) } else { Ok(s / n as f64) })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
}

impl LnCache {
    fn forward(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> Self {
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = gain[j] * xh + bias[j];
            }
        }
        Self { xhat, rstd, out }
    }
}

fn ln_backward(dy: &[f64], cache: &LnCache, gain: &[f64], grad: &mut [f64], g_off: usize, b_off: usize, d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            grad[g_off + j] += dyr[j] * xh[j];
            grad[b_off + j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct LayerCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    scores: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln1: LnCache,
    f_pre: Vec<f64>,
    f_act: Vec<f64>,
    ln2: LnCache,
}

/// Retained activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    tokens: Vec<u32>,
    len: usize,
    hidden_size: usize,
    heads: usize,
    emb: LnCache,
    layers: Vec<LayerCache>,
}

/// Borrowed view of one layer's distillation targets.
#[derive(Debug, Clone, Copy)]
pub struct LayerActivations<'a> {
    /// `heads × len × len` scaled pre-softmax scores.
    pub attention_scores: &'a [f64],
    /// `len × hidden` layer output.
    pub hidden_states: &'a [f64],
    pub heads: usize,
    pub len: usize,
    pub hidden_size: usize,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Output of layer `layer` (1-based); `0` is the embedding output.
    pub fn hidden(&self, layer: usize) -> &[f64] {
        if layer == 0 {
            &self.emb.out
        } else {
            &self.layers[layer - 1].ln2.out
        }
    }

    pub fn final_hidden(&self) -> &[f64] {
        self.hidden(self.layers.len())
    }

    /// Scaled pre-softmax scores of layer `layer` (1-based), all heads.
    pub fn scores(&self, layer: usize) -> &[f64] {
        &self.layers[layer - 1].scores
    }

    /// Post-softmax attention weights of layer `layer` (1-based).
    pub fn attention_weights(&self, layer: usize) -> &[f64] {
        &self.layers[layer - 1].probs
    }

    /// Pre-activation of the feed-forward block of layer `layer`.
    pub fn ffn_hidden(&self, layer: usize) -> (&[f64], &[f64]) {
        let l = &self.layers[layer - 1];
        (&l.f_pre, &l.f_act)
    }

    pub fn activations(&self, layer: usize) -> LayerActivations<'_> {
        LayerActivations {
            attention_scores: self.scores(layer),
            hidden_states: self.hidden(layer),
            heads: self.heads,
            len: self.len,
            hidden_size: self.hidden_size,
        }
    }
}

/// Upstream gradients with respect to retained activations. Entries left
/// as `None` are zero.
#[derive(Debug, Clone)]
pub struct ActivationGrads {
    /// Indexed by layer, `0` being the embedding output.
    hidden: Vec<Option<Vec<f64>>>,
    /// Indexed by layer (index `0` unused).
    scores: Vec<Option<Vec<f64>>>,
    len: usize,
    hidden_size: usize,
    heads: usize,
}

impl ActivationGrads {
    pub fn new(config: &TransformerConfig, len: usize) -> Self {
        Self {
            hidden: vec![None; config.layers + 1],
            scores: vec![None; config.layers + 1],
            len,
            hidden_size: config.hidden_size,
            heads: config.heads,
        }
    }

    pub fn hidden_mut(&mut self, layer: usize) -> &mut [f64] {
        let n = self.len * self.hidden_size;
        self.hidden[layer].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn scores_mut(&mut self, layer: usize) -> &mut [f64] {
        assert!(layer >= 1, "attention scores exist for layers 1..");
        let n = self.heads * self.len * self.len;
        self.scores[layer].get_or_insert_with(|| vec![0.0; n])
    }

    fn check(&self, layers: usize, len: usize, d: usize, h: usize) -> Result<(), ModelError> {
        if self.hidden.len() != layers + 1 || self.len != len || self.hidden_size != d || self.heads != h {
            return Err(ModelError::Shape("upstream gradients do not match the forward pass".into()));
        }
        Ok(())
    }
}

/// Affine map `x W + b`, used for task heads and hidden-state projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// `inputs × outputs` weights followed by `outputs` biases.
    pub params: Vec<f64>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let mut params = vec![0.0; inputs * outputs + outputs];
        for w in &mut params[..inputs * outputs] {
            *w = truncated_normal(rng, 0.02);
        }
        Self { inputs, outputs, params }
    }

    pub fn identity(n: usize) -> Self {
        let mut params = vec![0.0; n * n + n];
        for i in 0..n {
            params[i * n + i] = 1.0;
        }
        Self { inputs: n, outputs: n, params }
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.inputs * self.outputs]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.inputs * self.outputs..]
    }

    /// `x[rows×inputs] → rows×outputs`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.inputs;
        let mut out = vec![0.0; rows * self.outputs];
        matmul(x, self.weights(), &mut out, rows, self.inputs, self.outputs);
        add_bias(&mut out, self.bias());
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let rows = x.len() / self.inputs;
        let (wn, n) = (self.inputs * self.outputs, self.outputs);
        matmul_tn_acc(x, dy, &mut grad[..wn], rows, self.inputs, n);
        col_sum_acc(dy, &mut grad[wn..]);
        let mut dx = vec![0.0; x.len()];
        matmul_nt(dy, self.weights(), &mut dx, rows, n, self.inputs);
        dx
    }
}

/// Draws `n` token ids uniformly from `lo..vocab`.
pub fn random_tokens(rng: &mut Rng, n: usize, lo: u32, vocab: u32) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(lo..vocab)).collect()
}
