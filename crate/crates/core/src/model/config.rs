// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model hyper-parameters.
//!
//! `config.json` is read in the crate's own format (the fields of
//! [`ModelConfig`]) or as a Hugging Face `gpt2` / `llama` config, detected
//! by its `model_type` key.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::DEFAULT_NORM_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Layernorm,
    Rmsnorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosKind {
    Learned,
    Rotary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Gelu,
    GatedSilu,
}

/// Tensor naming scheme of the safetensors checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Naming {
    /// `wte`, `h.{i}.attn.c_attn`, ... with `(in, out)` matrices.
    #[default]
    Gpt2,
    /// `model.layers.{i}.self_attn.q_proj`, ... with `(out, in)` matrices.
    Llama,
}

fn default_eps() -> f64 {
    DEFAULT_NORM_EPS
}

fn default_theta() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Maximum sequence length accepted by `forward`.
    pub n_ctx: usize,
    pub norm_kind: NormKind,
    pub pos_kind: PosKind,
    pub ffn_kind: FfnKind,
    pub use_biases: bool,
    pub prepend_bos: bool,
    #[serde(default)]
    pub bos_token_id: Option<u32>,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    /// Unembedding shares the token embedding matrix.
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub naming: Naming,
}

impl ModelConfig {
    /// GPT-2 style: pre-LN, learned positions, GELU, biases.
    pub fn gpt2_style(n_layers: usize, n_heads: usize, d_head: usize, vocab_size: usize) -> Self {
        let d = n_heads * d_head;
        Self {
            n_layers,
            n_heads,
            d_model: d,
            d_head,
            d_ff: 4 * d,
            vocab_size,
            n_ctx: 64,
            norm_kind: NormKind::Layernorm,
            pos_kind: PosKind::Learned,
            ffn_kind: FfnKind::Gelu,
            use_biases: true,
            prepend_bos: false,
            bos_token_id: None,
            norm_eps: DEFAULT_NORM_EPS,
            rope_theta: default_theta(),
            tie_embeddings: false,
            naming: Naming::Gpt2,
        }
    }

    /// Llama style: RMSNorm, rotary positions, gated SiLU FFN, no biases.
    pub fn llama_style(n_layers: usize, n_heads: usize, d_head: usize, vocab_size: usize) -> Self {
        let d = n_heads * d_head;
        Self {
            n_layers,
            n_heads,
            d_model: d,
            d_head,
            d_ff: 3 * d,
            vocab_size,
            n_ctx: 64,
            norm_kind: NormKind::Rmsnorm,
            pos_kind: PosKind::Rotary,
            ffn_kind: FfnKind::GatedSilu,
            use_biases: false,
            prepend_bos: false,
            bos_token_id: None,
            norm_eps: DEFAULT_NORM_EPS,
            rope_theta: default_theta(),
            tie_embeddings: false,
            naming: Naming::Llama,
        }
    }

    /// GPT-2-small hyper-parameters (12 layers, 12 heads, d = 768).
    pub fn gpt2_small() -> Self {
        Self {
            n_ctx: 1024,
            vocab_size: 50257,
            prepend_bos: true,
            bos_token_id: Some(50256),
            tie_embeddings: true,
            ..Self::gpt2_style(12, 12, 64, 50257)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("n_ctx", self.n_ctx),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::load(
                    "config.json",
                    format!("{name} must be at least 1"),
                ));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::load(
                "config.json",
                format!(
                    "d_model {} != n_heads {} * d_head {}",
                    self.d_model, self.n_heads, self.d_head
                ),
            ));
        }
        if self.pos_kind == PosKind::Rotary && !self.d_head.is_multiple_of(2) {
            return Err(Error::load(
                "config.json",
                "rotary positions need an even d_head",
            ));
        }
        if self.naming == Naming::Gpt2
            && (self.norm_kind != NormKind::Layernorm
                || self.pos_kind != PosKind::Learned
                || self.ffn_kind != FfnKind::Gelu)
        {
            return Err(Error::load(
                "config.json",
                "gpt2 naming requires layernorm, learned positions and gelu",
            ));
        }
        if self.prepend_bos && self.bos_token_id.is_none() {
            return Err(Error::load(
                "config.json",
                "prepend_bos requires bos_token_id",
            ));
        }
        if let Some(b) = self.bos_token_id {
            if b as usize >= self.vocab_size {
                return Err(Error::load(
                    "config.json",
                    format!("bos_token_id {b} outside vocabulary"),
                ));
            }
        }
        Ok(())
    }

    /// Parses any supported `config.json` flavour and validates it.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value =
            serde_json::from_str(s).map_err(|e| Error::load("config.json", e.to_string()))?;
        let cfg = match v.get("model_type").and_then(Value::as_str) {
            Some("gpt2") => from_hf_gpt2(&v)?,
            Some("llama") => from_hf_llama(&v)?,
            Some(other) => {
                return Err(Error::load(
                    "config.json",
                    format!("unsupported model_type {other:?}"),
                ))
            }
            None => {
                serde_json::from_value(v).map_err(|e| Error::load("config.json", e.to_string()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn get_usize(v: &Value, key: &str) -> Result<usize> {
    v.get(key)
        .and_then(Value::as_u64)
        .map(|x| x as usize)
        .ok_or_else(|| Error::load("config.json", format!("missing integer field {key:?}")))
}

fn from_hf_gpt2(v: &Value) -> Result<ModelConfig> {
    let d = get_usize(v, "n_embd")?;
    let h = get_usize(v, "n_head")?;
    if h == 0 || d % h != 0 {
        return Err(Error::load("config.json", "n_embd not divisible by n_head"));
    }
    let d_ff = v
        .get("n_inner")
        .and_then(Value::as_u64)
        .map_or(4 * d, |x| x as usize);
    let vocab = get_usize(v, "vocab_size")?;
    let bos = v
        .get("bos_token_id")
        .and_then(Value::as_u64)
        .map(|x| x as u32);
    Ok(ModelConfig {
        n_layers: get_usize(v, "n_layer")?,
        n_heads: h,
        d_model: d,
        d_head: d / h,
        d_ff,
        vocab_size: vocab,
        n_ctx: get_usize(v, "n_positions")?,
        norm_kind: NormKind::Layernorm,
        pos_kind: PosKind::Learned,
        ffn_kind: FfnKind::Gelu,
        use_biases: true,
        prepend_bos: bos.is_some(),
        bos_token_id: bos,
        norm_eps: v
            .get("layer_norm_epsilon")
            .and_then(Value::as_f64)
            .unwrap_or(DEFAULT_NORM_EPS),
        rope_theta: default_theta(),
        tie_embeddings: true,
        naming: Naming::Gpt2,
    })
}

fn from_hf_llama(v: &Value) -> Result<ModelConfig> {
    let d = get_usize(v, "hidden_size")?;
    let h = get_usize(v, "num_attention_heads")?;
    if let Some(kv) = v.get("num_key_value_heads").and_then(Value::as_u64) {
        if kv as usize != h {
            return Err(Error::load(
                "config.json",
                "grouped-query attention (num_key_value_heads != num_attention_heads) is not supported",
            ));
        }
    }
    if h == 0 || d % h != 0 {
        return Err(Error::load(
            "config.json",
            "hidden_size not divisible by num_attention_heads",
        ));
    }
    let bos = v
        .get("bos_token_id")
        .and_then(Value::as_u64)
        .map(|x| x as u32);
    Ok(ModelConfig {
        n_layers: get_usize(v, "num_hidden_layers")?,
        n_heads: h,
        d_model: d,
        d_head: d / h,
        d_ff: get_usize(v, "intermediate_size")?,
        vocab_size: get_usize(v, "vocab_size")?,
        n_ctx: get_usize(v, "max_position_embeddings")?,
        norm_kind: NormKind::Rmsnorm,
        pos_kind: PosKind::Rotary,
        ffn_kind: FfnKind::GatedSilu,
        use_biases: v
            .get("attention_bias")
            .and_then(Value::as_bool)
            .unwrap_or(false),
        prepend_bos: bos.is_some(),
        bos_token_id: bos,
        norm_eps: v
            .get("rms_norm_eps")
            .and_then(Value::as_f64)
            .unwrap_or(DEFAULT_NORM_EPS),
        rope_theta: v
            .get("rope_theta")
            .and_then(Value::as_f64)
            .unwrap_or(default_theta()),
        tie_embeddings: v
            .get("tie_word_embeddings")
            .and_then(Value::as_bool)
            .unwrap_or(false),
        naming: Naming::Llama,
    })
}
