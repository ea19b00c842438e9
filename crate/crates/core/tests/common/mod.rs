// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent reference computations for integration tests.
//!
//! Everything here is recomputed in plain `f64` loops from the weights and
//! the cached residual stream, without touching the library's
//! decomposition or attribution code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use flowroutes_core::model::toy::random_weights;
use flowroutes_core::model::{ActivationCache, Model, ModelConfig, NormKind};
use flowroutes_core::routes::{EdgeKind, NodeId, Stage};
use flowroutes_core::tokenizer::Tokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("data")
}

pub fn gpt2_tokenizer() -> Tokenizer {
    Tokenizer::from_dir(&data_dir().join("gpt2-tokenizer")).expect("bundled GPT-2 tokenizer")
}

/// A random model drawn from `seed`: 2-4 layers, 2-4 heads, either
/// architecture family, plus a prompt of 4-8 ids.
pub fn seeded_toy(seed: u64) -> (Model, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(2..=4);
    let heads = rng.random_range(2..=4);
    let d_head = 2 * rng.random_range(1..=3);
    let vocab = 40;
    let mut cfg = if rng.random_bool(0.5) {
        ModelConfig::gpt2_style(layers, heads, d_head, vocab)
    } else {
        ModelConfig::llama_style(layers, heads, d_head, vocab)
    };
    cfg.n_ctx = 16;
    let weights = random_weights(&cfg, seed).expect("toy weights");
    let model = Model::new(&format!("toy-{seed}"), cfg, weights, None).expect("toy model");
    let n = rng.random_range(4..=8);
    let ids = (0..n).map(|_| rng.random_range(0..vocab as u32)).collect();
    (model, ids)
}

pub fn row(t: &flowroutes_core::tensor::Tensor, i: usize) -> Vec<f64> {
    t.row(i).iter().map(|&v| f64::from(v)).collect()
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn proximity(z: &[f64], y: &[f64]) -> f64 {
    let dist: f64 = z.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
    (l1(y) - dist).max(0.0)
}

/// Normalization input `x` scaled and gained, without offset, from
/// statistics recomputed here.
pub fn linear_norm(model: &Model, x: &[f64], gamma: &[f32]) -> Vec<f64> {
    let cfg = model.config();
    let d = x.len() as f64;
    match cfg.norm_kind {
        NormKind::Layernorm => {
            let mu = x.iter().sum::<f64>() / d;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            let s = (var + cfg.norm_eps).sqrt();
            x.iter()
                .zip(gamma)
                .map(|(v, &g)| f64::from(g) * (v - mu) / s)
                .collect()
        }
        NormKind::Rmsnorm => {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
            let s = (ms + cfg.norm_eps).sqrt();
            x.iter()
                .zip(gamma)
                .map(|(v, &g)| f64::from(g) * v / s)
                .collect()
        }
    }
}

/// `f^h(x_j)` of block `l` (0-based).
pub fn head_value(
    model: &Model,
    cache: &ActivationCache,
    l: usize,
    h: usize,
    j: usize,
) -> Vec<f64> {
    let cfg = model.config();
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let lw = &model.weights().layers[l];
    let xl = linear_norm(
        model,
        &row(&cache.layer(l).resid_in, j),
        &lw.attn_norm.gamma,
    );
    let mut v = vec![0.0; dh];
    for (c, vc) in v.iter_mut().enumerate() {
        for (i, xi) in xl.iter().enumerate() {
            *vc += xi * f64::from(lw.w_v.at(i, h * dh + c));
        }
    }
    let mut out = vec![0.0; d];
    for (c, vc) in v.iter().enumerate() {
        for (k, o) in out.iter_mut().enumerate() {
            *o += vc * f64::from(lw.w_o.at(h * dh + c, k));
        }
    }
    out
}

/// All constant vectors of block `l`'s attention output.
pub fn attn_bias(model: &Model, l: usize) -> Vec<f64> {
    let cfg = model.config();
    let (d, hd) = (cfg.d_model, cfg.n_heads * cfg.d_head);
    let lw = &model.weights().layers[l];
    let mut value = vec![0.0; hd];
    if let Some(beta) = &lw.attn_norm.beta {
        for (c, vc) in value.iter_mut().enumerate() {
            for (i, b) in beta.iter().enumerate() {
                *vc += f64::from(*b) * f64::from(lw.w_v.at(i, c));
            }
        }
    }
    if let Some(bv) = &lw.b_v {
        for (vc, b) in value.iter_mut().zip(bv) {
            *vc += f64::from(*b);
        }
    }
    let mut out = vec![0.0; d];
    for (c, vc) in value.iter().enumerate() {
        for (k, o) in out.iter_mut().enumerate() {
            *o += vc * f64::from(lw.w_o.at(c, k));
        }
    }
    if let Some(bo) = &lw.b_o {
        for (o, b) in out.iter_mut().zip(bo) {
            *o += f64::from(*b);
        }
    }
    out
}

/// One scored incoming edge of the full graph.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: EdgeKind,
    pub importance: f64,
    /// Per-head sub-edge importances (attention edges).
    pub heads: Vec<f64>,
}

/// Every edge of the information flow graph with raw (bias-dropped,
/// unpruned) importance.
pub fn full_graph(model: &Model, cache: &ActivationCache) -> Vec<OracleEdge> {
    let cfg = model.config();
    let (nl, nh, n) = (cfg.n_layers, cfg.n_heads, cache.seq_len());
    let mut edges = Vec::new();
    for l in 0..nl {
        let f: Vec<Vec<Vec<f64>>> = (0..nh)
            .map(|h| (0..n).map(|j| head_value(model, cache, l, h, j)).collect())
            .collect();
        let bias = attn_bias(model, l);
        let lc = cache.layer(l);
        for pos in 0..n {
            let y = row(&lc.resid_mid, pos);
            let mut prox = Vec::new();
            for h in 0..nh {
                for j in 0..=pos {
                    let a = f64::from(cache.attn(l, h, pos, j));
                    let term: Vec<f64> = f[h][j].iter().map(|v| a * v).collect();
                    prox.push(proximity(&term, &y));
                }
            }
            let p_res = proximity(&row(&lc.resid_in, pos), &y);
            let p_bias = proximity(&bias, &y);
            let total: f64 = prox.iter().sum::<f64>() + p_res + p_bias;
            let kept = total - p_bias;
            let e = |p: f64| {
                if total > 0.0 && kept > 0.0 {
                    p / kept
                } else {
                    1.0 / (nh * (pos + 1) + 1) as f64
                }
            };
            let dst = NodeId::after_attn(pos, l + 1);
            for j in 0..=pos {
                let heads: Vec<f64> = (0..nh).map(|h| e(prox[h * (pos + 1) + j])).collect();
                let mut imp: f64 = heads.iter().sum();
                if j == pos {
                    imp += e(p_res);
                }
                edges.push(OracleEdge {
                    src: if l == 0 {
                        NodeId::embed(j)
                    } else {
                        NodeId::after_layer(j, l)
                    },
                    dst,
                    kind: if j == pos {
                        EdgeKind::ResidualAttn
                    } else {
                        EdgeKind::Attn
                    },
                    importance: imp,
                    heads,
                });
            }
            let y = row(cache.resid_out(l), pos);
            let pr = proximity(&row(&lc.resid_mid, pos), &y);
            let pf = proximity(&row(&lc.ffn_out, pos), &y);
            let (er, ef) = if pr + pf > 0.0 {
                (pr / (pr + pf), pf / (pr + pf))
            } else {
                (0.5, 0.5)
            };
            let dst = NodeId::after_layer(pos, l + 1);
            let src = NodeId::after_attn(pos, l + 1);
            for (kind, importance) in [(EdgeKind::Ffn, ef), (EdgeKind::ResidualFfn, er)] {
                edges.push(OracleEdge {
                    src,
                    dst,
                    kind,
                    importance,
                    heads: Vec::new(),
                });
            }
        }
    }
    edges
}

/// Global pruning at `tau` followed by backward reachability from
/// `start`. Returns the node set and the surviving edges keyed by
/// `(dst, src, kind)`.
pub fn brute_force_routes(
    edges: &[OracleEdge],
    start: NodeId,
    tau: f64,
) -> (
    BTreeSet<NodeId>,
    BTreeMap<(NodeId, NodeId, EdgeKind), OracleEdge>,
) {
    let kept: Vec<&OracleEdge> = edges.iter().filter(|e| e.importance >= tau).collect();
    let mut nodes = BTreeSet::from([start]);
    loop {
        let before = nodes.len();
        for e in &kept {
            if nodes.contains(&e.dst) {
                nodes.insert(e.src);
            }
        }
        if nodes.len() == before {
            break;
        }
    }
    let routes = kept
        .into_iter()
        .filter(|e| nodes.contains(&e.dst))
        .map(|e| ((e.dst, e.src, e.kind), e.clone()))
        .collect();
    (nodes, routes)
}

pub fn is_embed(n: NodeId) -> bool {
    n.stage == Stage::Embed
}

/// Compares `extract_routes` with the brute-force construction. Returns a
/// description of the first mismatch.
pub fn check_against_oracle(
    model: &Model,
    cache: &ActivationCache,
    start: NodeId,
    tau: f64,
) -> Result<(), String> {
    let graph = flowroutes_core::routes::extract_routes(model, cache, start, tau, false)
        .map_err(|e| e.to_string())?;
    let (nodes, edges) = brute_force_routes(&full_graph(model, cache), start, tau);
    let got_nodes: BTreeSet<NodeId> = graph.node_ids().collect();
    if got_nodes != nodes {
        return Err(format!(
            "node sets differ at tau {tau}: extra {:?}, missing {:?}",
            got_nodes.difference(&nodes).collect::<Vec<_>>(),
            nodes.difference(&got_nodes).collect::<Vec<_>>()
        ));
    }
    if graph.edges.len() != edges.len() {
        return Err(format!(
            "{} edges, oracle has {}",
            graph.edges.len(),
            edges.len()
        ));
    }
    for e in &graph.edges {
        let o = edges
            .get(&(e.dst, e.src, e.kind))
            .ok_or_else(|| format!("edge {} -> {} not in oracle", e.src, e.dst))?;
        if (o.importance - e.importance).abs() > 1e-6 {
            return Err(format!(
                "edge {} -> {}: {} vs oracle {}",
                e.src, e.dst, e.importance, o.importance
            ));
        }
        let listed: Vec<usize> = e.heads.iter().map(|h| h.head).collect();
        let expected: Vec<usize> = (0..o.heads.len())
            .filter(|&h| o.heads[h] >= tau && o.heads[h] > 0.0)
            .collect();
        if listed != expected {
            return Err(format!(
                "edge {} -> {}: heads {listed:?} vs {expected:?}",
                e.src, e.dst
            ));
        }
        for h in &e.heads {
            if (h.importance - o.heads[h.head]).abs() > 1e-6 {
                return Err(format!("head {} on {} -> {}", h.head, e.src, e.dst));
            }
        }
    }
    Ok(())
}
