// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact additive decomposition of residual-stream nodes into the vectors
//! carried by incoming edges.
//!
//! With normalization statistics and attention weights held at their
//! forward-pass values, an attention block output is linear in its inputs:
//!
//! ```text
//! x^{lA}_pos = x^{l-1}_pos + sum_h sum_{j<=pos} alpha^h_{pos,j} f^h(x_j) + bias
//! f^h(x_j)   = x_j L W_V^h W_O^h
//! ```
//!
//! where `x L` is the centred, scaled and gained input (no offset). All
//! constant vectors (norm offset and value bias pushed through `W_O`, plus
//! the output bias) are collected into one bias term.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::model::{ActivationCache, Model, NormKind, NormStats};
use crate::routes::{NodeId, Stage};
use crate::tensor::{matmul, vec_mat_f64, Tensor};

/// Origin of one summand of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TermSource {
    /// `alpha^h_{pos,j} f^h(x_j)`.
    Head { head: usize, src: usize },
    /// The node's own residual input.
    Residual,
    /// The feed-forward output.
    Ffn,
    /// All constant vectors of an attention block.
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub source: TermSource,
    pub vector: Vec<f64>,
}

/// The summands of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeVectors {
    pub node: NodeId,
    /// Cached vector of `node`.
    pub target: Vec<f64>,
    pub terms: Vec<Term>,
}

impl EdgeVectors {
    pub fn sum(&self) -> Vec<f64> {
        let d = self.terms.first().map_or(0, |t| t.vector.len());
        let mut s = vec![0.0; d];
        for t in &self.terms {
            for (a, b) in s.iter_mut().zip(&t.vector) {
                *a += b;
            }
        }
        s
    }

    pub fn term(&self, source: TermSource) -> Option<&[f64]> {
        self.terms
            .iter()
            .find(|t| t.source == source)
            .map(|t| t.vector.as_slice())
    }
}

/// `x L`: the normalization applied with a frozen scale statistic and no
/// offset. Layernorm centres on the row's own mean.
pub fn linearized_norm_apply(
    x: &[f32],
    gamma: &[f32],
    kind: NormKind,
    scale: f64,
) -> Result<Vec<f64>> {
    if x.len() != gamma.len() {
        return Err(Error::Dimension(format!(
            "row of {} values, gain of {}",
            x.len(),
            gamma.len()
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Numeric {
            message: "normalization scale must be positive".into(),
            residual: scale,
        });
    }
    let mean = match kind {
        NormKind::Layernorm => x.iter().map(|&v| f64::from(v)).sum::<f64>() / x.len() as f64,
        NormKind::Rmsnorm => 0.0,
    };
    Ok(x.iter()
        .zip(gamma)
        .map(|(&v, &g)| (f64::from(v) - mean) / scale * f64::from(g))
        .collect())
}

fn linearized_row(x: &[f32], gamma: &[f32], stats: &NormStats, pos: usize) -> Vec<f64> {
    let mean = stats.mean_at(pos);
    let scale = stats.scale[pos];
    x.iter()
        .zip(gamma)
        .map(|(&v, &g)| (f64::from(v) - mean) / scale * f64::from(g))
        .collect()
}

/// Per-block values shared by every attention junction of the block.
#[derive(Debug)]
struct BlockValues {
    /// `f^h(x_j)` at `(j * n_heads + h) * d`.
    f: Vec<f32>,
    bias: Vec<f64>,
}

/// Proximities of every summand of an attention junction.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnProximities {
    pub node: NodeId,
    pub n_heads: usize,
    /// `proximity(alpha^h_{pos,j} f^h(x_j), y)`, head-major, `n_heads * (pos + 1)`.
    pub heads: Vec<f64>,
    pub residual: f64,
    pub bias: f64,
}

/// Proximities of the two summands of a feed-forward junction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfnProximities {
    pub node: NodeId,
    pub residual: f64,
    pub ffn: f64,
}

/// Decomposes the nodes of one cached forward pass. `f^h(x_j)` is computed
/// once per block on first use.
#[derive(Debug)]
pub struct Decomposer<'a> {
    model: &'a Model,
    cache: &'a ActivationCache,
    blocks: Vec<OnceLock<BlockValues>>,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// `max(|y|_1 - |z - y|_1, 0)` with `z = scale * z_raw`.
fn scaled_proximity(scale: f64, z_raw: &[f32], y: &[f64], y_norm: f64) -> f64 {
    let mut dist = 0.0;
    for (&z, &t) in z_raw.iter().zip(y) {
        dist += (scale * f64::from(z) - t).abs();
    }
    (y_norm - dist).max(0.0)
}

fn proximity_f64(z: &[f64], y: &[f64], y_norm: f64) -> f64 {
    let dist: f64 = z.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
    (y_norm - dist).max(0.0)
}

impl<'a> Decomposer<'a> {
    pub fn new(model: &'a Model, cache: &'a ActivationCache) -> Result<Self> {
        let cfg = model.config();
        if cache.n_layers() != cfg.n_layers || cache.final_resid().cols() != cfg.d_model {
            return Err(Error::Dimension(
                "activation cache was not produced by this model".into(),
            ));
        }
        Ok(Self {
            model,
            cache,
            blocks: (0..cfg.n_layers).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn cache(&self) -> &ActivationCache {
        self.cache
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Cached vector of a node.
    pub fn node_vector(&self, node: NodeId) -> Result<&[f32]> {
        node.validate(self.cache.n_layers(), self.cache.seq_len())?;
        let row = match node.stage {
            Stage::Embed if self.cache.n_layers() == 0 => self.cache.final_resid().row(node.pos),
            Stage::Embed => self.cache.layer(0).resid_in.row(node.pos),
            Stage::AfterAttn => self.cache.layer(node.layer - 1).resid_mid.row(node.pos),
            Stage::AfterLayer => self.cache.resid_out(node.layer - 1).row(node.pos),
        };
        Ok(row)
    }

    fn check(&self, layer: usize, pos: usize, stage: Stage) -> Result<NodeId> {
        let node = NodeId { layer, stage, pos };
        if layer == 0 {
            return Err(Error::OutOfRange(format!(
                "layer 0 has no incoming edges ({node})"
            )));
        }
        node.validate(self.cache.n_layers(), self.cache.seq_len())
            .map_err(|_| Error::OutOfRange(format!("{node}")))?;
        Ok(node)
    }

    fn block(&self, b: usize) -> &BlockValues {
        self.blocks[b].get_or_init(|| self.compute_block(b))
    }

    fn compute_block(&self, b: usize) -> BlockValues {
        let cfg = self.model.config();
        let lw = &self.model.weights().layers[b];
        let lc = self.cache.layer(b);
        let (n, d, nh, dh) = (self.cache.seq_len(), cfg.d_model, cfg.n_heads, cfg.d_head);
        let mut xl = Tensor::zeros(vec![n, d]);
        for j in 0..n {
            let row = linearized_row(lc.resid_in.row(j), &lw.attn_norm.gamma, &lc.attn_norm, j);
            for (dst, v) in xl.row_mut(j).iter_mut().zip(row) {
                *dst = v as f32;
            }
        }
        let v = matmul(&xl, &lw.w_v).expect("value projection shape");
        let mut f = vec![0.0f32; n * nh * d];
        for h in 0..nh {
            let vh = v.column_block(h * dh, (h + 1) * dh).expect("head block");
            let oh = lw.w_o.row_block(h * dh, (h + 1) * dh).expect("head block");
            let fh = matmul(&vh, &oh).expect("output projection shape");
            for j in 0..n {
                f[(j * nh + h) * d..(j * nh + h + 1) * d].copy_from_slice(fh.row(j));
            }
        }
        let mut value_const = match &lw.attn_norm.beta {
            Some(beta) => vec_mat_f64(&to_f64(beta), lw.w_v.data(), d),
            None => vec![0.0; d],
        };
        if let Some(bv) = &lw.b_v {
            for (a, b) in value_const.iter_mut().zip(bv) {
                *a += f64::from(*b);
            }
        }
        let mut bias = vec_mat_f64(&value_const, lw.w_o.data(), d);
        if let Some(bo) = &lw.b_o {
            for (a, b) in bias.iter_mut().zip(bo) {
                *a += f64::from(*b);
            }
        }
        BlockValues { f, bias }
    }

    /// `f^h(x_j)` for the attention block of node layer `layer`.
    pub fn head_value(&self, layer: usize, head: usize, src: usize) -> Result<Vec<f64>> {
        self.check(layer, src, Stage::AfterAttn)?;
        let nh = self.model.config().n_heads;
        if head >= nh {
            return Err(Error::OutOfRange(format!("head {head} of {nh}")));
        }
        let d = self.model.config().d_model;
        let start = (src * nh + head) * d;
        Ok(to_f64(&self.block(layer - 1).f[start..start + d]))
    }

    /// Summands of `x^{lA}_pos` for node layer `layer` (1-based).
    pub fn attn_edge_vectors(&self, layer: usize, pos: usize) -> Result<EdgeVectors> {
        let node = self.check(layer, pos, Stage::AfterAttn)?;
        let nh = self.model.config().n_heads;
        let d = self.model.config().d_model;
        let bv = self.block(layer - 1);
        let mut terms = Vec::with_capacity(nh * (pos + 1) + 2);
        for h in 0..nh {
            for j in 0..=pos {
                let a = f64::from(self.cache.attn(layer - 1, h, pos, j));
                let f = &bv.f[(j * nh + h) * d..(j * nh + h + 1) * d];
                terms.push(Term {
                    source: TermSource::Head { head: h, src: j },
                    vector: f.iter().map(|&v| a * f64::from(v)).collect(),
                });
            }
        }
        terms.push(Term {
            source: TermSource::Residual,
            vector: to_f64(self.cache.layer(layer - 1).resid_in.row(pos)),
        });
        terms.push(Term {
            source: TermSource::Bias,
            vector: bv.bias.clone(),
        });
        Ok(EdgeVectors {
            node,
            target: to_f64(self.cache.layer(layer - 1).resid_mid.row(pos)),
            terms,
        })
    }

    /// Summands of `x^l_pos`: the residual `x^{lA}_pos` and the FFN output.
    pub fn ffn_edge_vectors(&self, layer: usize, pos: usize) -> Result<EdgeVectors> {
        let node = self.check(layer, pos, Stage::AfterLayer)?;
        let lc = self.cache.layer(layer - 1);
        Ok(EdgeVectors {
            node,
            target: to_f64(self.cache.resid_out(layer - 1).row(pos)),
            terms: vec![
                Term {
                    source: TermSource::Residual,
                    vector: to_f64(lc.resid_mid.row(pos)),
                },
                Term {
                    source: TermSource::Ffn,
                    vector: to_f64(lc.ffn_out.row(pos)),
                },
            ],
        })
    }

    /// Proximity of every summand of `x^{lA}_pos` to the cached node,
    /// without materializing the summands.
    pub fn attn_proximities(&self, layer: usize, pos: usize) -> Result<AttnProximities> {
        let node = self.check(layer, pos, Stage::AfterAttn)?;
        let nh = self.model.config().n_heads;
        let d = self.model.config().d_model;
        let lc = self.cache.layer(layer - 1);
        let y = to_f64(lc.resid_mid.row(pos));
        let y_norm: f64 = y.iter().map(|v| v.abs()).sum();
        let bv = self.block(layer - 1);
        let mut heads = vec![0.0; nh * (pos + 1)];
        for h in 0..nh {
            for j in 0..=pos {
                let a = f64::from(self.cache.attn(layer - 1, h, pos, j));
                let f = &bv.f[(j * nh + h) * d..(j * nh + h + 1) * d];
                heads[h * (pos + 1) + j] = scaled_proximity(a, f, &y, y_norm);
            }
        }
        let residual = scaled_proximity(1.0, lc.resid_in.row(pos), &y, y_norm);
        let bias = proximity_f64(&bv.bias, &y, y_norm);
        Ok(AttnProximities {
            node,
            n_heads: nh,
            heads,
            residual,
            bias,
        })
    }

    pub fn ffn_proximities(&self, layer: usize, pos: usize) -> Result<FfnProximities> {
        let node = self.check(layer, pos, Stage::AfterLayer)?;
        let lc = self.cache.layer(layer - 1);
        let y = to_f64(self.cache.resid_out(layer - 1).row(pos));
        let y_norm: f64 = y.iter().map(|v| v.abs()).sum();
        Ok(FfnProximities {
            node,
            residual: scaled_proximity(1.0, lc.resid_mid.row(pos), &y, y_norm),
            ffn: scaled_proximity(1.0, lc.ffn_out.row(pos), &y, y_norm),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy::{random_weights, zero_block_weights};
    use crate::model::ModelConfig;
    use crate::tensor::layer_norm;

    fn max_err(a: &[f64], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - f64::from(*y)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_row_is_annihilated() {
        let y = linearized_norm_apply(&[2.0; 5], &[1.5; 5], NormKind::Layernorm, 0.3).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_scale_zero_mean_is_identity() {
        let x = [1.0, -2.0, 0.5, 0.5];
        let y = linearized_norm_apply(&x, &[1.0; 4], NormKind::Layernorm, 1.0).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn rms_linearization_does_not_centre() {
        let y = linearized_norm_apply(&[2.0, 2.0], &[1.0, 3.0], NormKind::Rmsnorm, 2.0).unwrap();
        assert_eq!(y, vec![1.0, 3.0]);
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        assert!(linearized_norm_apply(&[1.0], &[1.0], NormKind::Rmsnorm, 0.0).is_err());
        assert!(linearized_norm_apply(&[1.0], &[1.0], NormKind::Rmsnorm, -1.0).is_err());
    }

    #[test]
    fn linearization_plus_offset_matches_layer_norm() {
        let x = Tensor::from_rows(&[[0.3f32, -1.2, 2.5, 0.7, -0.1]]).unwrap();
        let gamma = [1.1f32, 0.9, -0.5, 2.0, 1.0];
        let beta = [0.1f32, -0.2, 0.3, 0.0, 0.5];
        let (y, _, sigma) = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let lin = linearized_norm_apply(x.row(0), &gamma, NormKind::Layernorm, sigma[0]).unwrap();
        for ((a, b), out) in lin.iter().zip(&beta).zip(y.row(0)) {
            assert!((a + f64::from(*b) - f64::from(*out)).abs() < 1e-5);
        }
    }

    fn toy(cfg: &ModelConfig, seed: u64) -> Model {
        Model::new("toy", cfg.clone(), random_weights(cfg, seed).unwrap(), None).unwrap()
    }

    #[test]
    fn single_token_terms() {
        let cfg = ModelConfig::gpt2_style(2, 3, 4, 20);
        let model = toy(&cfg, 1);
        let cache = model
            .forward(&model.tokens_from_ids(&[7], None).unwrap())
            .unwrap();
        let dec = Decomposer::new(&model, &cache).unwrap();
        for l in 1..=2 {
            let ev = dec.attn_edge_vectors(l, 0).unwrap();
            assert_eq!(ev.terms.len(), 3 + 2);
            let err = max_err(&ev.sum(), cache.layer(l - 1).resid_mid.row(0));
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn zero_blocks_give_zero_head_terms() {
        let cfg = ModelConfig::gpt2_style(2, 2, 4, 20);
        let model =
            Model::new("z", cfg.clone(), zero_block_weights(&cfg, 2).unwrap(), None).unwrap();
        let cache = model
            .forward(&model.tokens_from_ids(&[1, 2, 3], None).unwrap())
            .unwrap();
        let dec = Decomposer::new(&model, &cache).unwrap();
        let ev = dec.attn_edge_vectors(2, 2).unwrap();
        for t in &ev.terms {
            match t.source {
                TermSource::Head { .. } | TermSource::Bias => {
                    assert!(t.vector.iter().all(|&v| v == 0.0))
                }
                TermSource::Residual => {
                    assert_eq!(t.vector, to_f64(cache.layer(1).resid_in.row(2)))
                }
                TermSource::Ffn => unreachable!(),
            }
        }
    }

    #[test]
    fn ffn_terms_recompute_block() {
        let cfg = ModelConfig::llama_style(2, 2, 4, 20);
        let model = toy(&cfg, 3);
        let cache = model
            .forward(&model.tokens_from_ids(&[1, 5, 9, 2], None).unwrap())
            .unwrap();
        let dec = Decomposer::new(&model, &cache).unwrap();
        let lc = cache.layer(1);
        let recomputed =
            crate::model::forward::ffn_block(&lc.ffn_norm_out, &model.weights().layers[1], &cfg)
                .unwrap();
        for pos in 0..4 {
            let ev = dec.ffn_edge_vectors(2, pos).unwrap();
            assert_eq!(ev.terms.len(), 2);
            assert!(max_err(ev.term(TermSource::Ffn).unwrap(), recomputed.row(pos)) < 1e-6);
            assert!(max_err(&ev.sum(), cache.resid_out(1).row(pos)) < 1e-5);
        }
    }

    #[test]
    fn fast_proximities_match_materialized_terms() {
        let cfg = ModelConfig::gpt2_style(2, 2, 4, 20);
        let model = toy(&cfg, 4);
        let cache = model
            .forward(&model.tokens_from_ids(&[3, 1, 4, 1, 5], None).unwrap())
            .unwrap();
        let dec = Decomposer::new(&model, &cache).unwrap();
        let y = to_f64(cache.layer(0).resid_mid.row(4));
        let yn: f64 = y.iter().map(|v| v.abs()).sum();
        let ev = dec.attn_edge_vectors(1, 4).unwrap();
        let p = dec.attn_proximities(1, 4).unwrap();
        for t in &ev.terms {
            let expected = proximity_f64(&t.vector, &y, yn);
            let got = match t.source {
                TermSource::Head { head, src } => p.heads[head * 5 + src],
                TermSource::Residual => p.residual,
                TermSource::Bias => p.bias,
                TermSource::Ffn => unreachable!(),
            };
            assert!((expected - got).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_range_requests_fail() {
        let cfg = ModelConfig::gpt2_style(1, 2, 4, 20);
        let model = toy(&cfg, 5);
        let cache = model
            .forward(&model.tokens_from_ids(&[3, 1], None).unwrap())
            .unwrap();
        let dec = Decomposer::new(&model, &cache).unwrap();
        assert!(dec.attn_edge_vectors(0, 0).is_err());
        assert!(dec.attn_edge_vectors(2, 0).is_err());
        assert!(dec.ffn_edge_vectors(1, 2).is_err());
        assert!(dec.head_value(1, 2, 0).is_err());
    }

    #[test]
    fn head_terms_are_linear_in_source() {
        // f^h is linear in the linearized input, so doubling x_j L doubles it
        let cfg = ModelConfig::gpt2_style(1, 2, 4, 20);
        let model = toy(&cfg, 6);
        let lw = &model.weights().layers[0];
        let x = [0.5f32, -1.0, 2.0, 0.25, 1.5, -0.75, 0.0, 3.0];
        let a = linearized_norm_apply(&x, &lw.attn_norm.gamma, NormKind::Layernorm, 1.3).unwrap();
        let x2: Vec<f32> = x.iter().map(|v| v * 2.0).collect();
        let b = linearized_norm_apply(&x2, &lw.attn_norm.gamma, NormKind::Layernorm, 1.3).unwrap();
        let fa = vec_mat_f64(&vec_mat_f64(&a, lw.w_v.data(), 8), lw.w_o.data(), 8);
        let fb = vec_mat_f64(&vec_mat_f64(&b, lw.w_v.data(), 8), lw.w_o.data(), 8);
        for (p, q) in fa.iter().zip(&fb) {
            assert!((2.0 * p - q).abs() < 1e-9);
        }
    }
}
