// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass that records every intermediate the decomposition needs.

use super::config::{FfnKind, ModelConfig, NormKind, PosKind};
use super::weights::{LayerWeights, NormWeights};
use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{self, gelu, matmul, silu, Tensor};
use crate::tokenizer::TokenSeq;

/// Per-row statistics of a normalization layer, kept so that the layer can
/// later be linearized around the exact forward-pass values.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub kind: NormKind,
    /// Row means (layernorm only).
    pub mean: Option<Vec<f64>>,
    /// Row standard deviations (layernorm) or root-mean-squares (rmsnorm),
    /// epsilon included.
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn mean_at(&self, pos: usize) -> f64 {
        self.mean.as_ref().map_or(0.0, |m| m[pos])
    }
}

/// Everything recorded for one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// `x^{l-1}`, `n x d`.
    pub resid_in: Tensor,
    pub attn_norm: NormStats,
    /// Normalized `x^{l-1}`, the attention input.
    pub attn_norm_out: Tensor,
    /// `H x n x n`, rows sum to one over `j <= pos`.
    pub attn_weights: Tensor,
    /// Attention block output (all heads, output bias included), `n x d`.
    pub attn_out: Tensor,
    /// `x^{lA}`, `n x d`.
    pub resid_mid: Tensor,
    pub ffn_norm: NormStats,
    pub ffn_norm_out: Tensor,
    /// `FFN_l(x^{lA})`, `n x d`.
    pub ffn_out: Tensor,
}

/// Immutable record of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    tokens: TokenSeq,
    layers: Vec<LayerCache>,
    final_resid: Tensor,
    final_norm: NormStats,
    /// Logits of the final position only.
    logits: Vec<f32>,
}

impl ActivationCache {
    pub fn tokens(&self) -> &TokenSeq {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Block `l` (0-based).
    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    /// `x^l` after block `l` (0-based), i.e. the input of block `l + 1`.
    pub fn resid_out(&self, l: usize) -> &Tensor {
        self.layers
            .get(l + 1)
            .map_or(&self.final_resid, |next| &next.resid_in)
    }

    /// `x^L`.
    pub fn final_resid(&self) -> &Tensor {
        &self.final_resid
    }

    pub fn final_norm(&self) -> &NormStats {
        &self.final_norm
    }

    /// Attention weight of head `h` in block `l` from `pos` to `j`.
    pub fn attn(&self, l: usize, h: usize, pos: usize, j: usize) -> f32 {
        let n = self.seq_len();
        self.layers[l].attn_weights.data()[(h * n + pos) * n + j]
    }

    /// `n x n` attention matrix of one head.
    pub fn attn_matrix(&self, l: usize, h: usize) -> Tensor {
        let n = self.seq_len();
        let start = h * n * n;
        let data = self.layers[l].attn_weights.data()[start..start + n * n].to_vec();
        Tensor::new(vec![n, n], data).expect("square block")
    }

    /// Next-token logits at the final position.
    pub fn logits(&self) -> &[f32] {
        &self.logits
    }
}

/// Greedy next token: argmax of the final-position logits, lowest id on
/// ties.
pub fn next_token(cache: &ActivationCache) -> (u32, f32) {
    let mut best = (0u32, f32::NEG_INFINITY);
    for (i, &v) in cache.logits.iter().enumerate() {
        if v > best.1 {
            best = (i as u32, v);
        }
    }
    best
}

fn normalize(x: &Tensor, w: &NormWeights, cfg: &ModelConfig) -> Result<(Tensor, NormStats)> {
    match cfg.norm_kind {
        NormKind::Layernorm => {
            let beta = w
                .beta
                .as_deref()
                .ok_or_else(|| Error::load("norm", "missing beta"))?;
            let (y, mean, scale) = tensor::layer_norm(x, &w.gamma, beta, cfg.norm_eps)?;
            Ok((
                y,
                NormStats {
                    kind: NormKind::Layernorm,
                    mean: Some(mean),
                    scale,
                },
            ))
        }
        NormKind::Rmsnorm => {
            let (y, scale) = tensor::rms_norm(x, &w.gamma, cfg.norm_eps)?;
            Ok((
                y,
                NormStats {
                    kind: NormKind::Rmsnorm,
                    mean: None,
                    scale,
                },
            ))
        }
    }
}

fn add_bias(t: &mut Tensor, b: Option<&[f32]>) {
    let Some(b) = b else { return };
    for i in 0..t.rows() {
        for (v, bb) in t.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&[f32]>) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    add_bias(&mut y, b);
    Ok(y)
}

/// Rotates query/key rows in place (rotate-half convention).
pub(crate) fn apply_rotary(t: &mut Tensor, n_heads: usize, d_head: usize, theta: f64) {
    let half = d_head / 2;
    for pos in 0..t.rows() {
        let row = t.row_mut(pos);
        for h in 0..n_heads {
            let base = h * d_head;
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / d_head as f64);
                let angle = pos as f64 * freq;
                let (sin, cos) = angle.sin_cos();
                let a = f64::from(row[base + i]);
                let b = f64::from(row[base + i + half]);
                row[base + i] = (a * cos - b * sin) as f32;
                row[base + i + half] = (b * cos + a * sin) as f32;
            }
        }
    }
}

fn attention_block(
    h_in: &Tensor,
    lw: &LayerWeights,
    cfg: &ModelConfig,
) -> Result<(Tensor, Tensor)> {
    let n = h_in.rows();
    let (nh, dh) = (cfg.n_heads, cfg.d_head);
    let mut q = linear(h_in, &lw.w_q, lw.b_q.as_deref())?;
    let mut k = linear(h_in, &lw.w_k, lw.b_k.as_deref())?;
    let v = linear(h_in, &lw.w_v, lw.b_v.as_deref())?;
    if cfg.pos_kind == PosKind::Rotary {
        apply_rotary(&mut q, nh, dh, cfg.rope_theta);
        apply_rotary(&mut k, nh, dh, cfg.rope_theta);
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = vec![0.0f32; nh * n * n];
    let mut z = Tensor::zeros(vec![n, cfg.d_model]);
    let mut scores = vec![0.0f32; n];
    for h in 0..nh {
        let cols = h * dh..(h + 1) * dh;
        for pos in 0..n {
            let qrow = &q.row(pos)[cols.clone()];
            for j in 0..=pos {
                let krow = &k.row(j)[cols.clone()];
                let dot: f64 = qrow
                    .iter()
                    .zip(krow)
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                scores[j] = (dot * scale) as f32;
            }
            let out = &mut weights[(h * n + pos) * n..(h * n + pos) * n + pos + 1];
            tensor::softmax_into(&scores[..=pos], out);
            let mut acc = vec![0.0f64; dh];
            for (j, &a) in out.iter().enumerate() {
                let vrow = &v.row(j)[cols.clone()];
                for (s, vv) in acc.iter_mut().zip(vrow) {
                    *s += f64::from(a) * f64::from(*vv);
                }
            }
            for (dst, s) in z.row_mut(pos)[cols.clone()].iter_mut().zip(acc) {
                *dst = s as f32;
            }
        }
    }
    let out = linear(&z, &lw.w_o, lw.b_o.as_deref())?;
    Ok((Tensor::new(vec![nh, n, n], weights)?, out))
}

/// Position-wise feed-forward block applied to already-normalized rows.
pub(crate) fn ffn_block(h_in: &Tensor, lw: &LayerWeights, cfg: &ModelConfig) -> Result<Tensor> {
    let mut hidden = linear(h_in, &lw.w_in, lw.b_in.as_deref())?;
    match cfg.ffn_kind {
        FfnKind::Gelu => hidden.data_mut().iter_mut().for_each(|v| *v = gelu(*v)),
        FfnKind::GatedSilu => {
            let gate_w = lw
                .w_gate
                .as_ref()
                .ok_or_else(|| Error::load("w_gate", "missing for gated ffn"))?;
            let gate = linear(h_in, gate_w, lw.b_gate.as_deref())?;
            for (u, g) in hidden.data_mut().iter_mut().zip(gate.data()) {
                *u *= silu(*g);
            }
        }
    }
    linear(&hidden, &lw.w_out, lw.b_out.as_deref())
}

pub(super) fn run(model: &Model, tokens: &TokenSeq) -> Result<ActivationCache> {
    let cfg = model.config();
    let w = model.weights();
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Empty("forward needs at least one token".into()));
    }
    if n > cfg.n_ctx {
        return Err(Error::Context {
            len: n,
            limit: cfg.n_ctx,
        });
    }
    let d = cfg.d_model;
    let mut x = Tensor::zeros(vec![n, d]);
    for (pos, &id) in tokens.ids.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Vocabulary {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        let row = x.row_mut(pos);
        row.copy_from_slice(w.token_embed.row(id as usize));
        if let Some(p) = &w.pos_embed {
            for (v, pv) in row.iter_mut().zip(p.row(pos)) {
                *v += pv;
            }
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lw in &w.layers {
        let (attn_in, attn_norm) = normalize(&x, &lw.attn_norm, cfg)?;
        let (attn_weights, attn_out) = attention_block(&attn_in, lw, cfg)?;
        let resid_mid = x.add(&attn_out)?;
        let (ffn_in, ffn_norm) = normalize(&resid_mid, &lw.ffn_norm, cfg)?;
        let ffn_out = ffn_block(&ffn_in, lw, cfg)?;
        let next = resid_mid.add(&ffn_out)?;
        layers.push(LayerCache {
            resid_in: std::mem::replace(&mut x, next),
            attn_norm,
            attn_norm_out: attn_in,
            attn_weights,
            attn_out,
            resid_mid,
            ffn_norm,
            ffn_norm_out: ffn_in,
            ffn_out,
        });
    }

    let last = x.row_block(n - 1, n)?;
    let (normed_last, _) = normalize(&last, &w.final_norm, cfg)?;
    let logits = matmul(&normed_last, &w.unembed)?.into_data();
    let (_, final_norm) = normalize(&x, &w.final_norm, cfg)?;
    Ok(ActivationCache {
        tokens: tokens.clone(),
        layers,
        final_resid: x,
        final_norm,
        logits,
    })
}
