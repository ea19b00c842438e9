// SPDX-License-Identifier: MIT OR Apache-2.0

//! The information flow graph and top-down extraction of its important
//! subgraph.

mod node;
mod serialize;

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

pub use node::{NodeId, Stage};
pub use serialize::{from_json, pen_width, to_dot, to_json, to_json_value};

use crate::attribution::{
    attn_importances_from_proximities, ffn_importances_from_proximities, EdgeImportances,
};
use crate::decomposition::Decomposer;
use crate::error::{Error, Result};
use crate::model::{ActivationCache, Model};

/// Threshold used when none is given.
pub const DEFAULT_TAU: f64 = 0.04;

/// Whether pruned junctions are renormalized when not specified.
pub const DEFAULT_RENORMALIZE: bool = true;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Attention from another position.
    Attn,
    /// Same-position attention junction: residual plus self-attention.
    ResidualAttn,
    Ffn,
    ResidualFfn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: usize,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: EdgeKind,
    pub importance: f64,
    /// Heads whose sub-edge importance reaches `tau` (attention edges).
    pub heads: Vec<HeadScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteNode {
    pub id: NodeId,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteMeta {
    pub model: String,
    pub prompt: String,
    pub tau: f64,
    pub start: NodeId,
}

/// The extracted important subgraph. Nodes and edges are kept in
/// canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteGraph {
    pub meta: RouteMeta,
    pub nodes: Vec<RouteNode>,
    pub edges: Vec<RouteEdge>,
}

impl RouteGraph {
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    /// Retained sub-edges as `(dst node layer, head, src pos, dst pos)`.
    pub fn sub_edges(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        self.edges.iter().flat_map(|e| {
            e.heads
                .iter()
                .map(move |h| (e.dst.layer, h.head, e.src.pos, e.dst.pos))
        })
    }

    /// Puts nodes and edges in canonical order.
    pub fn canonicalize(&mut self) {
        self.nodes.sort_by_key(|n| n.id);
        self.edges.sort_by_key(|e| (e.dst, e.src, e.kind));
        for e in &mut self.edges {
            e.heads.sort_by_key(|h| h.head);
        }
    }
}

/// Source node of attention edges out of position `j` into node layer
/// `layer`.
fn attn_source(j: usize, layer: usize) -> NodeId {
    NodeId::residual(j, layer - 1)
}

/// Scored incoming edges of a non-embedding node, before thresholding.
pub fn junction_importances(
    dec: &Decomposer<'_>,
    node: NodeId,
    tau: f64,
    renormalize: bool,
) -> Result<Option<EdgeImportances>> {
    Ok(match node.stage {
        Stage::Embed => None,
        Stage::AfterAttn => Some(attn_importances_from_proximities(
            &dec.attn_proximities(node.layer, node.pos)?,
            tau,
            renormalize,
        )),
        Stage::AfterLayer => Some(ffn_importances_from_proximities(
            &dec.ffn_proximities(node.layer, node.pos)?,
        )),
    })
}

/// Incoming edges of a junction whose importance reaches `tau`.
pub fn retained_edges(imp: &EdgeImportances, tau: f64) -> Vec<RouteEdge> {
    let node = imp.node;
    let mut out = Vec::new();
    match imp.ffn {
        Some(ffn) => {
            let src = NodeId::after_attn(node.pos, node.layer);
            for (kind, importance) in [(EdgeKind::Ffn, ffn), (EdgeKind::ResidualFfn, imp.residual)]
            {
                if importance >= tau {
                    out.push(RouteEdge {
                        src,
                        dst: node,
                        kind,
                        importance,
                        heads: Vec::new(),
                    });
                }
            }
        }
        None => {
            for j in 0..=node.pos {
                let importance = imp.attn(j);
                if importance < tau {
                    continue;
                }
                let heads = (0..imp.n_heads)
                    .map(|h| HeadScore {
                        head: h,
                        importance: imp.sub(h, j),
                    })
                    .filter(|h| h.importance >= tau && h.importance > 0.0)
                    .collect();
                out.push(RouteEdge {
                    src: attn_source(j, node.layer),
                    dst: node,
                    kind: if j == node.pos {
                        EdgeKind::ResidualAttn
                    } else {
                        EdgeKind::Attn
                    },
                    importance,
                    heads,
                });
            }
        }
    }
    out
}

/// Prompt text of a cache: the token strings without a leading BOS.
pub fn prompt_text(cache: &ActivationCache) -> String {
    let t = cache.tokens();
    t.strings[usize::from(t.has_bos)..].concat()
}

/// Breadth-first extraction from `start` toward the embeddings. Each
/// junction is scored once; only the cache is read.
pub fn extract_routes(
    model: &Model,
    cache: &ActivationCache,
    start: NodeId,
    tau: f64,
    renormalize: bool,
) -> Result<RouteGraph> {
    start.validate(cache.n_layers(), cache.seq_len())?;
    let dec = Decomposer::new(model, cache)?;
    let mut visited = HashSet::from([start]);
    let mut queue = VecDeque::from([start]);
    let mut edges = Vec::new();
    while let Some(node) = queue.pop_front() {
        let Some(imp) = junction_importances(&dec, node, tau, renormalize)? else {
            continue;
        };
        for e in retained_edges(&imp, tau) {
            if visited.insert(e.src) {
                queue.push_back(e.src);
            }
            edges.push(e);
        }
    }
    let strings = &cache.tokens().strings;
    let nodes = visited
        .into_iter()
        .map(|id| RouteNode {
            id,
            token: strings[id.pos].clone(),
        })
        .collect();
    let mut graph = RouteGraph {
        meta: RouteMeta {
            model: model.name().to_string(),
            prompt: prompt_text(cache),
            tau,
            start,
        },
        nodes,
        edges,
    };
    graph.canonicalize();
    Ok(graph)
}

/// Default start node: top of the residual stream at the last position.
pub fn default_start(cache: &ActivationCache) -> NodeId {
    NodeId::top(cache.seq_len() - 1, cache.n_layers())
}

/// Top of the residual stream at `position`, or the default start.
pub fn start_at(cache: &ActivationCache, position: Option<usize>) -> Result<NodeId> {
    match position {
        None => Ok(default_start(cache)),
        Some(p) if p < cache.seq_len() => Ok(NodeId::top(p, cache.n_layers())),
        Some(p) => Err(Error::OutOfRange(format!(
            "position {p} in a sequence of {} tokens",
            cache.seq_len()
        ))),
    }
}
