//! RoPE transformer encoders and the interleaved time/band stack.
//!
//! Tokens are kept band-major as `(K, T, D)`. The time encoder of each layer
//! sees K sequences of length T; the band encoder sees T sequences of length K
//! after a `(T, K, D)` permutation. Both are pre-norm RMSNorm encoders with
//! bias-free attention projections and a GELU feed-forward block.

use melrof_autograd::{Graph, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Result};
use crate::melband::RMS_EPS;
use crate::params::{linear_bias, linear_weight, ones, Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub dropout: f64,
    pub rope_base: f64,
}

impl EncoderConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            ffn_multiplier: 4,
            dropout: 0.1,
            rope_base: 10000.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(config(format!("head dim {} must be even for RoPE", self.head_dim())));
        }
        if self.ffn_multiplier == 0 || !(0.0..1.0).contains(&self.dropout) || self.rope_base <= 0.0 {
            return Err(config("invalid ffn multiplier, dropout or rope base"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterleavedStackConfig {
    /// Number of (time encoder, band encoder) pairs.
    pub layers: usize,
    pub encoder: EncoderConfig,
}

impl InterleavedStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(config("need at least one layer"));
        }
        self.encoder.validate()
    }
}

/// `(cos, sin)` tables of shape `(positions, head_dim / 2)`.
fn rope_tables<T: Real>(positions: &[usize], head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let angle = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            cos.push(T::of(angle.cos()));
            sin.push(T::of(angle.sin()));
        }
    }
    (cos, sin)
}

fn rotate_rows<T: Real>(data: &mut [T], head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = head_dim / 2;
    for (row, (c, s)) in data
        .chunks_mut(head_dim)
        .zip(cos.chunks(half).zip(sin.chunks(half)))
    {
        for i in 0..half {
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            let s = if inverse { -s[i] } else { s[i] };
            row[2 * i] = a * c[i] - b * s;
            row[2 * i + 1] = a * s + b * c[i];
        }
    }
}

/// Rotates each pair `(2i, 2i + 1)` of row `r` by `positions[r] * base^(-2i / head_dim)`.
pub fn rope_rotate<T: Real>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 || s[0] != positions.len() {
        return Err(shape(format!("rope input {s:?} with {} positions", positions.len())));
    }
    if !s[1].is_multiple_of(2) {
        return Err(config(format!("head dim {} must be even", s[1])));
    }
    let (cos, sin) = rope_tables::<T>(positions, s[1], base);
    let mut out = x.clone();
    rotate_rows(out.data_mut(), s[1], &cos, &sin, false);
    Ok(out)
}

/// RoPE on a `(B, S, H, hd)` variable with the same positions in every sequence.
fn rope_var<T: Real>(g: &Graph<T>, x: Var, positions: &[usize], base: f64) -> Result<Var> {
    let s = g.shape(x);
    let (seq, heads, hd) = (s[1], s[2], s[3]);
    if positions.len() != seq {
        return Err(shape(format!("{} positions for sequences of length {seq}", positions.len())));
    }
    let (c1, s1) = rope_tables::<T>(positions, hd, base);
    // Repeat each position's table across heads so rows line up with (S, H).
    let half = hd / 2;
    let expand = |t: &[T]| -> Vec<T> {
        t.chunks(half)
            .flat_map(|r| std::iter::repeat_n(r, heads).flatten().copied())
            .collect()
    };
    let (cos, sin) = (expand(&c1), expand(&s1));
    let block = seq * heads * hd;
    let xv = g.value(x);
    let mut out = xv.as_ref().clone();
    for b in out.data_mut().chunks_mut(block) {
        rotate_rows(b, hd, &cos, &sin, false);
    }
    Ok(g.custom("rope", &[x], out, move |grad, sink| {
        if let Some(gx) = sink.grad_mut(x) {
            let mut back = grad.clone();
            for b in back.data_mut().chunks_mut(block) {
                rotate_rows(b, hd, &cos, &sin, true);
            }
            for (o, v) in gx.iter_mut().zip(back.data()) {
                *o += *v;
            }
        }
    })?)
}

/// Parameter names of one encoder, in registration order.
pub fn encoder_param_names(prefix: &str) -> [String; 10] {
    [
        "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
    ]
    .map(|n| format!("{prefix}.{n}"))
}

pub fn init_encoder<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let (d, h) = (cfg.dim, cfg.dim * cfg.ffn_multiplier);
    let [an, wq, wk, wv, wo, fnm, w1, b1, w2, b2] = encoder_param_names(prefix);
    store.insert(an, ones(d));
    store.insert(wq, linear_weight(rng, d, d));
    store.insert(wk, linear_weight(rng, d, d));
    store.insert(wv, linear_weight(rng, d, d));
    store.insert(wo, linear_weight(rng, d, d));
    store.insert(fnm, ones(d));
    store.insert(w1, linear_weight(rng, d, h));
    store.insert(b1, linear_bias(rng, d, h));
    store.insert(w2, linear_weight(rng, h, d));
    store.insert(b2, linear_bias(rng, h, d));
}

fn check_tokens<T: Real>(g: &Graph<T>, x: Var, dim: usize) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[2] != dim {
        return Err(shape(format!("expected (batch, seq, {dim}) tokens, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Multi-head self-attention over `(B, S, D)` with RoPE on queries and keys;
/// positions run `0..S` in every sequence.
pub fn attention_var<T: Real>(
    g: &Graph<T>,
    params: &Bound,
    prefix: &str,
    x: Var,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let (_, s) = check_tokens(g, x, cfg.dim)?;
    let positions: Vec<usize> = (0..s).collect();
    attention_at_var(g, params, prefix, x, &positions, cfg)
}

/// [`attention_var`] with explicit token positions.
pub fn attention_at_var<T: Real>(
    g: &Graph<T>,
    params: &Bound,
    prefix: &str,
    x: Var,
    positions: &[usize],
    cfg: &EncoderConfig,
) -> Result<Var> {
    let (b, s) = check_tokens(g, x, cfg.dim)?;
    let (h, hd) = (cfg.heads, cfg.head_dim());
    let [_, wq, wk, wv, wo, ..] = encoder_param_names(prefix);
    let heads_first = |v: Var| -> Result<Var> {
        let v = g.permute(v, &[0, 2, 1, 3])?;
        Ok(g.reshape(v, &[b * h, s, hd])?)
    };
    let q = g.matmul(x, params.var(&wq)?)?;
    let q = g.scale(q, T::of(1.0 / (hd as f64).sqrt()))?;
    let q = rope_var(g, g.reshape(q, &[b, s, h, hd])?, positions, cfg.rope_base)?;
    let k = g.matmul(x, params.var(&wk)?)?;
    let k = rope_var(g, g.reshape(k, &[b, s, h, hd])?, positions, cfg.rope_base)?;
    let v = g.reshape(g.matmul(x, params.var(&wv)?)?, &[b, s, h, hd])?;
    let (q, k, v) = (heads_first(q)?, heads_first(k)?, heads_first(v)?);
    let scores = g.bmm(q, k, false, true)?;
    let p = g.softmax(scores, 2)?;
    let o = g.bmm(p, v, false, false)?;
    let o = g.permute(g.reshape(o, &[b, h, s, hd])?, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, s, cfg.dim])?;
    Ok(g.matmul(o, params.var(&wo)?)?)
}

/// Pre-norm encoder: `x + attn(norm(x))`, then `h + ffn(norm(h))`.
pub fn encoder_block_var<T: Real>(
    g: &Graph<T>,
    params: &Bound,
    prefix: &str,
    x: Var,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let [an, _, _, _, _, fnm, w1, b1, w2, b2] = encoder_param_names(prefix);
    let eps = T::of(RMS_EPS);
    let a = g.rmsnorm(x, params.var(&an)?, eps)?;
    let a = attention_var(g, params, prefix, a, cfg)?;
    let a = g.dropout(a, cfg.dropout)?;
    let h = g.add(x, a)?;
    let f = g.rmsnorm(h, params.var(&fnm)?, eps)?;
    let f = g.linear(f, params.var(&w1)?, Some(params.var(&b1)?))?;
    let f = g.gelu(f)?;
    let f = g.linear(f, params.var(&w2)?, Some(params.var(&b2)?))?;
    let f = g.dropout(f, cfg.dropout)?;
    Ok(g.add(h, f)?)
}

pub fn time_prefix(layer: usize) -> String {
    format!("layers.{layer}.time")
}

pub fn band_prefix(layer: usize) -> String {
    format!("layers.{layer}.band")
}

pub fn init_interleaved_stack<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &InterleavedStackConfig,
    rng: &mut ChaCha8Rng,
) {
    for l in 0..cfg.layers {
        init_encoder(store, &time_prefix(l), &cfg.encoder, rng);
        init_encoder(store, &band_prefix(l), &cfg.encoder, rng);
    }
}

/// Alternating time/band encoders over `(K, T, D)` tokens.
pub fn interleaved_stack_var<T: Real>(
    g: &Graph<T>,
    params: &Bound,
    h: Var,
    cfg: &InterleavedStackConfig,
) -> Result<Var> {
    check_tokens(g, h, cfg.encoder.dim)?;
    let mut h = h;
    for l in 0..cfg.layers {
        h = encoder_block_var(g, params, &time_prefix(l), h, &cfg.encoder)?;
        let t = g.permute(h, &[1, 0, 2])?;
        let t = encoder_block_var(g, params, &band_prefix(l), t, &cfg.encoder)?;
        h = g.permute(t, &[1, 0, 2])?;
    }
    Ok(h)
}

fn eval_graph<T: Real>(params: &ParamStore<T>) -> (Graph<T>, Bound) {
    let g = Graph::new();
    g.disable_grad();
    let bound = params.bind(&g, |_| false);
    (g, bound)
}

/// Inference-mode attention of one `(seq, D)` sequence.
pub fn attention<T: Real>(x: &Tensor<T>, params: &ParamStore<T>, prefix: &str, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let positions: Vec<usize> = (0..x.shape().first().copied().unwrap_or(0)).collect();
    attention_at(x, &positions, params, prefix, cfg)
}

/// [`attention`] with explicit token positions.
pub fn attention_at<T: Real>(
    x: &Tensor<T>,
    positions: &[usize],
    params: &ParamStore<T>,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(shape(format!("expected (seq, D) tokens, got {:?}", x.shape())));
    }
    let (g, bound) = eval_graph(params);
    let s = x.shape().to_vec();
    let xv = g.constant(x.clone().reshape(&[1, s[0], s[1]])?);
    let y = attention_at_var(&g, &bound, prefix, xv, positions, cfg)?;
    Ok(g.value(y).as_ref().clone().reshape(&s)?)
}

/// Inference-mode encoder block of one `(seq, D)` sequence.
pub fn encoder_block<T: Real>(x: &Tensor<T>, params: &ParamStore<T>, prefix: &str, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(shape(format!("expected (seq, D) tokens, got {:?}", x.shape())));
    }
    let (g, bound) = eval_graph(params);
    let s = x.shape().to_vec();
    let xv = g.constant(x.clone().reshape(&[1, s[0], s[1]])?);
    let y = encoder_block_var(&g, &bound, prefix, xv, cfg)?;
    Ok(g.value(y).as_ref().clone().reshape(&s)?)
}

/// Inference-mode interleaved stack on a `(D, K, T)` tensor.
pub fn interleaved_stack<T: Real>(h: &Tensor<T>, params: &ParamStore<T>, cfg: &InterleavedStackConfig) -> Result<Tensor<T>> {
    let (g, bound) = eval_graph(params);
    let x = g.permute(g.constant(h.clone()), &[1, 2, 0])?;
    let y = interleaved_stack_var(&g, &bound, x, cfg)?;
    let y = g.permute(y, &[2, 0, 1])?;
    Ok(g.value(y).as_ref().clone())
}
