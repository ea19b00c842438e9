// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic models for tests, fixtures and benchmarks.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{FfnKind, ModelConfig, NormKind, PosKind};
use super::weights::{save_safetensors, LayerWeights, ModelWeights, NormWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::toy_vocabulary;

/// Number of entries in [`toy_vocabulary`].
pub const TOY_VOCAB_SIZE: usize = 287;

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn vec(&mut self, len: usize, mean: f32, std: f32) -> Vec<f32> {
        let normal = Normal::new(mean, std).expect("positive std");
        (0..len).map(|_| normal.sample(&mut self.rng)).collect()
    }

    fn mat(&mut self, rows: usize, cols: usize, std: f32) -> Tensor {
        Tensor::new(vec![rows, cols], self.vec(rows * cols, 0.0, std)).expect("shape matches")
    }

    fn norm(&mut self, cfg: &ModelConfig) -> NormWeights {
        let d = cfg.d_model;
        NormWeights {
            gamma: self.vec(d, 1.0, 0.2),
            beta: (cfg.norm_kind == NormKind::Layernorm).then(|| self.vec(d, 0.0, 0.2)),
        }
    }

    fn bias(&mut self, cfg: &ModelConfig, len: usize) -> Option<Vec<f32>> {
        cfg.use_biases.then(|| self.vec(len, 0.0, 0.1))
    }
}

/// Random weights for `cfg`, fully determined by `seed`.
pub fn random_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut g = Gen::new(seed);
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let std_d = 1.0 / (d as f32).sqrt();
    let std_f = 1.0 / (f as f32).sqrt();
    let token_embed = g.mat(v, d, 1.0);
    let pos_embed = (cfg.pos_kind == PosKind::Learned).then(|| g.mat(cfg.n_ctx, d, 0.5));
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let attn_norm = g.norm(cfg);
        let w_q = g.mat(d, d, 2.0 * std_d);
        let w_k = g.mat(d, d, 2.0 * std_d);
        let w_v = g.mat(d, d, std_d);
        let w_o = g.mat(d, d, std_d);
        let (b_q, b_k, b_v, b_o) = (
            g.bias(cfg, d),
            g.bias(cfg, d),
            g.bias(cfg, d),
            g.bias(cfg, d),
        );
        let ffn_norm = g.norm(cfg);
        let w_in = g.mat(d, f, std_d);
        let b_in = g.bias(cfg, f);
        let (w_gate, b_gate) = match cfg.ffn_kind {
            FfnKind::GatedSilu => (Some(g.mat(d, f, std_d)), g.bias(cfg, f)),
            FfnKind::Gelu => (None, None),
        };
        let w_out = g.mat(f, d, std_f);
        let b_out = g.bias(cfg, d);
        layers.push(LayerWeights {
            attn_norm,
            w_q,
            w_k,
            w_v,
            w_o,
            b_q,
            b_k,
            b_v,
            b_o,
            ffn_norm,
            w_in,
            b_in,
            w_gate,
            b_gate,
            w_out,
            b_out,
        });
    }
    let final_norm = g.norm(cfg);
    let unembed = if cfg.tie_embeddings {
        token_embed.transpose()?
    } else {
        g.mat(d, v, std_d)
    };
    let w = ModelWeights {
        token_embed,
        pos_embed,
        layers,
        final_norm,
        unembed,
    };
    w.validate(cfg)?;
    Ok(w)
}

/// Random embeddings with every block weight and bias set to zero, unit
/// norm gains and zero norm offsets.
pub fn zero_block_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    let mut w = random_weights(cfg, seed)?;
    let zero = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let zero_opt = |b: &mut Option<Vec<f32>>| {
        if let Some(b) = b {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    };
    let reset = |n: &mut NormWeights| {
        n.gamma.iter_mut().for_each(|v| *v = 1.0);
        if let Some(b) = &mut n.beta {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    };
    for l in &mut w.layers {
        reset(&mut l.attn_norm);
        reset(&mut l.ffn_norm);
        for t in [
            &mut l.w_q,
            &mut l.w_k,
            &mut l.w_v,
            &mut l.w_o,
            &mut l.w_in,
            &mut l.w_out,
        ] {
            zero(t);
        }
        if let Some(t) = &mut l.w_gate {
            zero(t);
        }
        for b in [
            &mut l.b_q,
            &mut l.b_k,
            &mut l.b_v,
            &mut l.b_o,
            &mut l.b_in,
            &mut l.b_gate,
            &mut l.b_out,
        ] {
            zero_opt(b);
        }
    }
    Ok(w)
}

/// One-layer GPT-2 style model whose head 0 attends to the previous
/// position and whose head 1 attends uniformly.
///
/// Positions are one-hot in dimensions `0..n_ctx`, token identity lives in
/// the remaining dimensions, and the feed-forward block is zero.
pub fn prev_token_model(vocab_size: usize, seed: u64) -> Result<(ModelConfig, ModelWeights)> {
    const N_CTX: usize = 8;
    const D_HEAD: usize = 8;
    const POS_SCALE: f32 = 4.0;
    const QUERY_SCALE: f32 = 10.0;
    let mut cfg = ModelConfig::gpt2_style(1, 2, D_HEAD, vocab_size);
    cfg.n_ctx = N_CTX;
    let d = cfg.d_model;
    let mut w = zero_block_weights(&cfg, seed)?;
    let mut g = Gen::new(seed ^ 0x5eed);
    let mut token_embed = Tensor::zeros(vec![vocab_size, d]);
    for t in 0..vocab_size {
        let tok = g.vec(d - N_CTX, 0.0, 1.0);
        token_embed.row_mut(t)[N_CTX..].copy_from_slice(&tok);
    }
    let mut pos_embed = Tensor::zeros(vec![N_CTX, d]);
    for p in 0..N_CTX {
        pos_embed.row_mut(p)[p] = POS_SCALE;
    }
    let l = &mut w.layers[0];
    for p in 1..N_CTX {
        let i = l.w_q.cols() * p + (p - 1);
        l.w_q.data_mut()[i] = QUERY_SCALE;
    }
    for p in 0..N_CTX {
        let i = l.w_k.cols() * p + p;
        l.w_k.data_mut()[i] = 1.0;
    }
    // both heads read and write the token dimensions
    for h in 0..2 {
        for i in 0..D_HEAD {
            let src = N_CTX + i;
            let col = h * D_HEAD + i;
            let wv = l.w_v.cols();
            l.w_v.data_mut()[src * wv + col] = 1.0;
            let wo = l.w_o.cols();
            l.w_o.data_mut()[col * wo + src] = 1.0;
        }
    }
    w.unembed = token_embed.transpose()?;
    w.token_embed = token_embed;
    w.pos_embed = Some(pos_embed);
    w.validate(&cfg)?;
    Ok((cfg, w))
}

/// Writes `config.json`, `model.safetensors` and the toy tokenizer files.
pub fn write_model_dir(dir: &Path, cfg: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join("config.json");
    let json = serde_json::to_string_pretty(cfg)?;
    fs::write(&config_path, json).map_err(|e| Error::io(&config_path, e))?;
    save_safetensors(&dir.join("model.safetensors"), cfg, weights)?;
    if cfg.vocab_size >= TOY_VOCAB_SIZE {
        let (vocab, merges) = toy_vocabulary();
        for (name, body) in [("vocab.json", vocab), ("merges.txt", merges)] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_weights_are_seeded() {
        let cfg = ModelConfig::gpt2_style(2, 2, 4, 32);
        assert_eq!(
            random_weights(&cfg, 7).unwrap(),
            random_weights(&cfg, 7).unwrap()
        );
        assert_ne!(
            random_weights(&cfg, 7).unwrap(),
            random_weights(&cfg, 8).unwrap()
        );
    }

    #[test]
    fn llama_weights_validate() {
        let cfg = ModelConfig::llama_style(2, 2, 4, 32);
        let w = random_weights(&cfg, 1).unwrap();
        assert!(w.pos_embed.is_none());
        assert!(w.layers[0].w_gate.is_some());
        assert!(w.layers[0].b_q.is_none());
    }

    #[test]
    fn zero_blocks_keep_embeddings() {
        let cfg = ModelConfig::gpt2_style(1, 2, 4, 16);
        let w = zero_block_weights(&cfg, 3).unwrap();
        assert!(w.token_embed.max_abs() > 0.0);
        assert_eq!(w.layers[0].w_v.max_abs(), 0.0);
        assert_eq!(
            w.layers[0]
                .b_o
                .as_ref()
                .unwrap()
                .iter()
                .fold(0.0f32, |a, b| a.max(b.abs())),
            0.0
        );
    }

    #[test]
    fn toy_vocabulary_size_matches_constant() {
        let (vocab, _) = toy_vocabulary();
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&vocab).unwrap();
        assert_eq!(map.len(), TOY_VOCAB_SIZE);
    }
}
