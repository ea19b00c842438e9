// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model parameters in a canonical `x * W` layout, plus safetensors
//! loading and saving for the GPT-2 and Llama naming schemes.
//!
//! GPT-2 (`Conv1D`) checkpoints already store `(in, out)` matrices; Llama
//! (`nn.Linear`) checkpoints store `(out, in)` and are transposed on load.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::config::{FfnKind, ModelConfig, Naming, NormKind, PosKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights {
    pub gamma: Vec<f32>,
    /// Present for layernorm only.
    pub beta: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: NormWeights,
    /// `d x d`, heads occupy contiguous column blocks of width `d_head`.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `d x d`, heads occupy contiguous row blocks of height `d_head`.
    pub w_o: Tensor,
    pub b_q: Option<Vec<f32>>,
    pub b_k: Option<Vec<f32>>,
    pub b_v: Option<Vec<f32>>,
    pub b_o: Option<Vec<f32>>,
    pub ffn_norm: NormWeights,
    /// `d x d_ff` (the "up" projection for gated FFNs).
    pub w_in: Tensor,
    pub b_in: Option<Vec<f32>>,
    /// `d x d_ff`, gated FFNs only.
    pub w_gate: Option<Tensor>,
    pub b_gate: Option<Vec<f32>>,
    /// `d_ff x d`.
    pub w_out: Tensor,
    pub b_out: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `vocab x d`.
    pub token_embed: Tensor,
    /// `n_ctx x d`, learned positions only.
    pub pos_embed: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormWeights,
    /// `d x vocab`.
    pub unembed: Tensor,
}

fn check_shape(name: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::load(
            name,
            format!("shape {:?}, expected {expected:?}", t.shape()),
        ));
    }
    Ok(())
}

fn check_vec(name: &str, v: &[f32], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::load(
            name,
            format!("length {}, expected {len}", v.len()),
        ));
    }
    Ok(())
}

fn check_norm(name: &str, n: &NormWeights, cfg: &ModelConfig) -> Result<()> {
    check_vec(&format!("{name}.gamma"), &n.gamma, cfg.d_model)?;
    match (&n.beta, cfg.norm_kind) {
        (Some(b), NormKind::Layernorm) => check_vec(&format!("{name}.beta"), b, cfg.d_model),
        (None, NormKind::Rmsnorm) => Ok(()),
        (None, NormKind::Layernorm) => Err(Error::load(name, "layernorm needs a beta")),
        (Some(_), NormKind::Rmsnorm) => Err(Error::load(name, "rmsnorm has no beta")),
    }
}

fn check_bias(name: &str, b: &Option<Vec<f32>>, len: usize, cfg: &ModelConfig) -> Result<()> {
    match (b, cfg.use_biases) {
        (Some(v), true) => check_vec(name, v, len),
        (None, false) => Ok(()),
        (None, true) => Err(Error::load(name, "missing bias")),
        (Some(_), false) => Err(Error::load(name, "unexpected bias (use_biases = false)")),
    }
}

impl ModelWeights {
    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        check_shape("token_embed", &self.token_embed, &[v, d])?;
        match (&self.pos_embed, cfg.pos_kind) {
            (Some(p), PosKind::Learned) => {
                if p.cols() != d || p.rows() < cfg.n_ctx {
                    return Err(Error::load(
                        "pos_embed",
                        format!(
                            "shape {:?}, expected at least [{}, {d}]",
                            p.shape(),
                            cfg.n_ctx
                        ),
                    ));
                }
            }
            (None, PosKind::Rotary) => {}
            (None, PosKind::Learned) => return Err(Error::load("pos_embed", "missing")),
            (Some(_), PosKind::Rotary) => {
                return Err(Error::load("pos_embed", "unexpected for rotary positions"))
            }
        }
        if self.layers.len() != cfg.n_layers {
            return Err(Error::load(
                "layers",
                format!("{} layers, expected {}", self.layers.len(), cfg.n_layers),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            check_norm(&p("attn_norm"), &l.attn_norm, cfg)?;
            for (n, t) in [
                ("w_q", &l.w_q),
                ("w_k", &l.w_k),
                ("w_v", &l.w_v),
                ("w_o", &l.w_o),
            ] {
                check_shape(&p(n), t, &[d, d])?;
            }
            for (n, b) in [
                ("b_q", &l.b_q),
                ("b_k", &l.b_k),
                ("b_v", &l.b_v),
                ("b_o", &l.b_o),
            ] {
                check_bias(&p(n), b, d, cfg)?;
            }
            check_norm(&p("ffn_norm"), &l.ffn_norm, cfg)?;
            check_shape(&p("w_in"), &l.w_in, &[d, f])?;
            check_bias(&p("b_in"), &l.b_in, f, cfg)?;
            match (&l.w_gate, cfg.ffn_kind) {
                (Some(g), FfnKind::GatedSilu) => {
                    check_shape(&p("w_gate"), g, &[d, f])?;
                    check_bias(&p("b_gate"), &l.b_gate, f, cfg)?;
                }
                (None, FfnKind::Gelu) => {}
                _ => {
                    return Err(Error::load(
                        p("w_gate"),
                        "gate projection does not match ffn_kind",
                    ))
                }
            }
            check_shape(&p("w_out"), &l.w_out, &[f, d])?;
            check_bias(&p("b_out"), &l.b_out, d, cfg)?;
        }
        check_norm("final_norm", &self.final_norm, cfg)?;
        check_shape("unembed", &self.unembed, &[d, v])?;
        Ok(())
    }

    /// `W_V^h`: columns `h*d_head..(h+1)*d_head` of the value projection.
    pub fn w_v_head(&self, layer: usize, head: usize, d_head: usize) -> Result<Tensor> {
        self.layers[layer]
            .w_v
            .column_block(head * d_head, (head + 1) * d_head)
    }

    /// `W_O^h`: rows `h*d_head..(h+1)*d_head` of the output projection.
    pub fn w_o_head(&self, layer: usize, head: usize, d_head: usize) -> Result<Tensor> {
        self.layers[layer]
            .w_o
            .row_block(head * d_head, (head + 1) * d_head)
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

struct Source<'a> {
    st: SafeTensors<'a>,
    prefix: String,
}

impl Source<'_> {
    fn raw(&self, name: &str) -> Option<(Vec<usize>, Vec<f32>)> {
        let full = format!("{}{name}", self.prefix);
        let view = self.st.tensor(&full).ok()?;
        Some((view.shape().to_vec(), to_f32(&view).ok()?))
    }

    fn has(&self, name: &str) -> bool {
        self.st.tensor(&format!("{}{name}", self.prefix)).is_ok()
    }

    fn matrix(&self, name: &str, shape: [usize; 2]) -> Result<Tensor> {
        let (s, data) = self
            .raw(name)
            .ok_or_else(|| Error::load(name, "missing tensor or unsupported dtype"))?;
        if s != shape {
            return Err(Error::load(
                name,
                format!("shape {s:?}, expected {shape:?}"),
            ));
        }
        Tensor::new(s, data)
    }

    /// Reads an `(out, in)` matrix and returns it as `(in, out)`.
    fn linear(&self, name: &str, d_in: usize, d_out: usize) -> Result<Tensor> {
        self.matrix(name, [d_out, d_in])?.transpose()
    }

    fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        let (s, data) = self
            .raw(name)
            .ok_or_else(|| Error::load(name, "missing tensor or unsupported dtype"))?;
        if s != [len] {
            return Err(Error::load(name, format!("shape {s:?}, expected [{len}]")));
        }
        Ok(data)
    }

    fn opt_vector(&self, name: &str, len: usize, present: bool) -> Result<Option<Vec<f32>>> {
        if present {
            self.vector(name, len).map(Some)
        } else {
            Ok(None)
        }
    }
}

fn to_f32(view: &TensorView<'_>) -> Result<Vec<f32>> {
    let bytes = view.data();
    let out = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        other => return Err(Error::load("dtype", format!("unsupported dtype {other:?}"))),
    };
    Ok(out)
}

/// Loads a safetensors file according to the naming scheme in `cfg`.
pub fn load_safetensors(path: &Path, cfg: &ModelConfig) -> Result<ModelWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::load(path.display().to_string(), e.to_string()))?;
    let weights = match cfg.naming {
        Naming::Gpt2 => {
            let prefix = if st.tensor("wte.weight").is_ok() {
                ""
            } else {
                "transformer."
            };
            load_gpt2(
                &Source {
                    st,
                    prefix: prefix.into(),
                },
                cfg,
            )?
        }
        Naming::Llama => load_llama(
            &Source {
                st,
                prefix: String::new(),
            },
            cfg,
        )?,
    };
    weights.validate(cfg)?;
    Ok(weights)
}

fn load_gpt2(src: &Source<'_>, cfg: &ModelConfig) -> Result<ModelWeights> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let norm = |base: &str| -> Result<NormWeights> {
        Ok(NormWeights {
            gamma: src.vector(&format!("{base}.weight"), d)?,
            beta: Some(src.vector(&format!("{base}.bias"), d)?),
        })
    };
    let token_embed = src.matrix("wte.weight", [v, d])?;
    let (pshape, pdata) = src
        .raw("wpe.weight")
        .ok_or_else(|| Error::load("wpe.weight", "missing tensor"))?;
    let pos_embed = Tensor::new(pshape, pdata)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("h.{i}.{s}");
        let qkv = src.matrix(&p("attn.c_attn.weight"), [d, 3 * d])?;
        let qkv_b = src.vector(&p("attn.c_attn.bias"), 3 * d)?;
        layers.push(LayerWeights {
            attn_norm: norm(&p("ln_1"))?,
            w_q: qkv.column_block(0, d)?,
            w_k: qkv.column_block(d, 2 * d)?,
            w_v: qkv.column_block(2 * d, 3 * d)?,
            w_o: src.matrix(&p("attn.c_proj.weight"), [d, d])?,
            b_q: Some(qkv_b[..d].to_vec()),
            b_k: Some(qkv_b[d..2 * d].to_vec()),
            b_v: Some(qkv_b[2 * d..].to_vec()),
            b_o: Some(src.vector(&p("attn.c_proj.bias"), d)?),
            ffn_norm: norm(&p("ln_2"))?,
            w_in: src.matrix(&p("mlp.c_fc.weight"), [d, f])?,
            b_in: Some(src.vector(&p("mlp.c_fc.bias"), f)?),
            w_gate: None,
            b_gate: None,
            w_out: src.matrix(&p("mlp.c_proj.weight"), [f, d])?,
            b_out: Some(src.vector(&p("mlp.c_proj.bias"), d)?),
        });
    }
    let unembed = if !cfg.tie_embeddings && src.has("lm_head.weight") {
        src.linear("lm_head.weight", d, v)?
    } else {
        token_embed.transpose()?
    };
    Ok(ModelWeights {
        token_embed,
        pos_embed: Some(pos_embed),
        layers,
        final_norm: norm("ln_f")?,
        unembed,
    })
}

fn load_llama(src: &Source<'_>, cfg: &ModelConfig) -> Result<ModelWeights> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let ln = cfg.norm_kind == NormKind::Layernorm;
    let bias = cfg.use_biases;
    let norm = |base: &str| -> Result<NormWeights> {
        Ok(NormWeights {
            gamma: src.vector(&format!("{base}.weight"), d)?,
            beta: src.opt_vector(&format!("{base}.bias"), d, ln)?,
        })
    };
    let token_embed = src.matrix("model.embed_tokens.weight", [v, d])?;
    let pos_embed = match cfg.pos_kind {
        PosKind::Learned => {
            let (s, data) = src
                .raw("model.embed_positions.weight")
                .ok_or_else(|| Error::load("model.embed_positions.weight", "missing tensor"))?;
            Some(Tensor::new(s, data)?)
        }
        PosKind::Rotary => None,
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("model.layers.{i}.{s}");
        let gated = cfg.ffn_kind == FfnKind::GatedSilu;
        layers.push(LayerWeights {
            attn_norm: norm(&p("input_layernorm"))?,
            w_q: src.linear(&p("self_attn.q_proj.weight"), d, d)?,
            w_k: src.linear(&p("self_attn.k_proj.weight"), d, d)?,
            w_v: src.linear(&p("self_attn.v_proj.weight"), d, d)?,
            w_o: src.linear(&p("self_attn.o_proj.weight"), d, d)?,
            b_q: src.opt_vector(&p("self_attn.q_proj.bias"), d, bias)?,
            b_k: src.opt_vector(&p("self_attn.k_proj.bias"), d, bias)?,
            b_v: src.opt_vector(&p("self_attn.v_proj.bias"), d, bias)?,
            b_o: src.opt_vector(&p("self_attn.o_proj.bias"), d, bias)?,
            ffn_norm: norm(&p("post_attention_layernorm"))?,
            w_in: src.linear(&p("mlp.up_proj.weight"), d, f)?,
            b_in: src.opt_vector(&p("mlp.up_proj.bias"), f, bias)?,
            w_gate: if gated {
                Some(src.linear(&p("mlp.gate_proj.weight"), d, f)?)
            } else {
                None
            },
            b_gate: src.opt_vector(&p("mlp.gate_proj.bias"), f, bias && gated)?,
            w_out: src.linear(&p("mlp.down_proj.weight"), f, d)?,
            b_out: src.opt_vector(&p("mlp.down_proj.bias"), d, bias)?,
        });
    }
    let unembed = if !cfg.tie_embeddings && src.has("lm_head.weight") {
        src.linear("lm_head.weight", d, v)?
    } else {
        token_embed.transpose()?
    };
    Ok(ModelWeights {
        token_embed,
        pos_embed,
        layers,
        final_norm: norm("model.norm")?,
        unembed,
    })
}

// ---------------------------------------------------------------------------
// Saving
// ---------------------------------------------------------------------------

fn le_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Writes `weights` as a single safetensors file using the naming scheme
/// in `cfg` (inverse of [`load_safetensors`]).
pub fn save_safetensors(path: &Path, cfg: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
        named.push((name, shape, le_bytes(data)));
    };
    let lin = |t: &Tensor| -> Result<Tensor> { t.transpose() };
    let d = cfg.d_model;
    match cfg.naming {
        Naming::Gpt2 => {
            push(
                "wte.weight".into(),
                weights.token_embed.shape().to_vec(),
                weights.token_embed.data(),
            );
            let pos = weights
                .pos_embed
                .as_ref()
                .ok_or_else(|| Error::load("wpe.weight", "missing"))?;
            push("wpe.weight".into(), pos.shape().to_vec(), pos.data());
            for (i, l) in weights.layers.iter().enumerate() {
                let p = |s: &str| format!("h.{i}.{s}");
                push(p("ln_1.weight"), vec![d], &l.attn_norm.gamma);
                push(
                    p("ln_1.bias"),
                    vec![d],
                    l.attn_norm.beta.as_deref().unwrap_or(&[]),
                );
                let mut qkv = Vec::with_capacity(d * 3 * d);
                for r in 0..d {
                    qkv.extend_from_slice(l.w_q.row(r));
                    qkv.extend_from_slice(l.w_k.row(r));
                    qkv.extend_from_slice(l.w_v.row(r));
                }
                push(p("attn.c_attn.weight"), vec![d, 3 * d], &qkv);
                let mut qkv_b = Vec::with_capacity(3 * d);
                for b in [&l.b_q, &l.b_k, &l.b_v] {
                    qkv_b.extend_from_slice(
                        b.as_deref()
                            .ok_or_else(|| Error::load(p("attn.c_attn.bias"), "missing"))?,
                    );
                }
                push(p("attn.c_attn.bias"), vec![3 * d], &qkv_b);
                push(p("attn.c_proj.weight"), vec![d, d], l.w_o.data());
                push(
                    p("attn.c_proj.bias"),
                    vec![d],
                    l.b_o.as_deref().unwrap_or(&[]),
                );
                push(p("ln_2.weight"), vec![d], &l.ffn_norm.gamma);
                push(
                    p("ln_2.bias"),
                    vec![d],
                    l.ffn_norm.beta.as_deref().unwrap_or(&[]),
                );
                push(p("mlp.c_fc.weight"), l.w_in.shape().to_vec(), l.w_in.data());
                push(
                    p("mlp.c_fc.bias"),
                    vec![cfg.d_ff],
                    l.b_in.as_deref().unwrap_or(&[]),
                );
                push(
                    p("mlp.c_proj.weight"),
                    l.w_out.shape().to_vec(),
                    l.w_out.data(),
                );
                push(
                    p("mlp.c_proj.bias"),
                    vec![d],
                    l.b_out.as_deref().unwrap_or(&[]),
                );
            }
            push("ln_f.weight".into(), vec![d], &weights.final_norm.gamma);
            push(
                "ln_f.bias".into(),
                vec![d],
                weights.final_norm.beta.as_deref().unwrap_or(&[]),
            );
            if !cfg.tie_embeddings {
                let lm = lin(&weights.unembed)?;
                push("lm_head.weight".into(), lm.shape().to_vec(), lm.data());
            }
        }
        Naming::Llama => {
            push(
                "model.embed_tokens.weight".into(),
                weights.token_embed.shape().to_vec(),
                weights.token_embed.data(),
            );
            if let Some(pos) = &weights.pos_embed {
                push(
                    "model.embed_positions.weight".into(),
                    pos.shape().to_vec(),
                    pos.data(),
                );
            }
            let norm = |push: &mut dyn FnMut(String, Vec<usize>, &[f32]),
                        base: String,
                        n: &NormWeights| {
                push(format!("{base}.weight"), vec![d], &n.gamma);
                if let Some(b) = &n.beta {
                    push(format!("{base}.bias"), vec![d], b);
                }
            };
            for (i, l) in weights.layers.iter().enumerate() {
                let p = |s: &str| format!("model.layers.{i}.{s}");
                norm(&mut push, p("input_layernorm"), &l.attn_norm);
                norm(&mut push, p("post_attention_layernorm"), &l.ffn_norm);
                let mut mats: Vec<(String, &Tensor, &Option<Vec<f32>>)> = vec![
                    (p("self_attn.q_proj"), &l.w_q, &l.b_q),
                    (p("self_attn.k_proj"), &l.w_k, &l.b_k),
                    (p("self_attn.v_proj"), &l.w_v, &l.b_v),
                    (p("self_attn.o_proj"), &l.w_o, &l.b_o),
                    (p("mlp.up_proj"), &l.w_in, &l.b_in),
                    (p("mlp.down_proj"), &l.w_out, &l.b_out),
                ];
                if let Some(g) = &l.w_gate {
                    mats.push((p("mlp.gate_proj"), g, &l.b_gate));
                }
                for (base, w, b) in mats {
                    let t = lin(w)?;
                    push(format!("{base}.weight"), t.shape().to_vec(), t.data());
                    if let Some(b) = b {
                        push(format!("{base}.bias"), vec![b.len()], b);
                    }
                }
            }
            norm(&mut push, "model.norm".into(), &weights.final_norm);
            if !cfg.tie_embeddings {
                let lm = lin(&weights.unembed)?;
                push("lm_head.weight".into(), lm.shape().to_vec(), lm.data());
            }
        }
    }
    let views = named
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::load(n.clone(), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = HashMap::from([("format".to_string(), "pt".to_string())]);
    safetensors::serialize_to_file(views, &Some(meta), path)
        .map_err(|e| Error::load(path.display().to_string(), e.to_string()))
}
