// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON and DOT output of route graphs.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{EdgeKind, NodeId, RouteGraph, Stage};
use crate::error::Result;

/// Pretty JSON with fixed key order.
pub fn to_json(route: &RouteGraph) -> Result<String> {
    Ok(serde_json::to_string_pretty(route)?)
}

pub fn to_json_value(route: &RouteGraph) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(route)?)
}

pub fn from_json(text: &str) -> Result<RouteGraph> {
    Ok(serde_json::from_str(text)?)
}

/// DOT pen width of an edge: `0.5 + 9.5 * importance`, so importance 0.5
/// is drawn 5.25 wide.
pub fn pen_width(importance: f64) -> f64 {
    0.5 + 9.5 * importance
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c.is_control() => {}
            c => out.push(c),
        }
    }
    out
}

fn node_label(id: NodeId) -> String {
    match id.stage {
        Stage::Embed => "emb".to_string(),
        Stage::AfterAttn => format!("{}A", id.layer),
        Stage::AfterLayer => format!("{}", id.layer),
    }
}

fn edge_color(kind: EdgeKind) -> &'static str {
    match kind {
        EdgeKind::Attn => "#1f77b4",
        EdgeKind::ResidualAttn => "#7f7f7f",
        EdgeKind::Ffn => "#d62728",
        EdgeKind::ResidualFfn => "#bcbcbc",
    }
}

/// Graphviz rendering: one column per token position, rows by depth.
pub fn to_dot(route: &RouteGraph) -> String {
    let mut out = String::new();
    let m = &route.meta;
    let _ = writeln!(out, "digraph routes {{");
    let _ = writeln!(
        out,
        "  graph [rankdir=BT, newrank=true, label=\"{} tau={}\", labelloc=t];",
        escape(&m.prompt),
        m.tau
    );
    let _ = writeln!(out, "  node [shape=box, style=rounded, fontsize=10];");
    let mut columns: BTreeMap<usize, Vec<&super::RouteNode>> = BTreeMap::new();
    let mut rows: BTreeMap<(usize, Stage), Vec<NodeId>> = BTreeMap::new();
    for n in &route.nodes {
        columns.entry(n.id.pos).or_default().push(n);
        rows.entry((n.id.layer, n.id.stage)).or_default().push(n.id);
    }
    for (pos, nodes) in &columns {
        let _ = writeln!(out, "  subgraph cluster_p{pos} {{");
        let _ = writeln!(out, "    label=\"{}\";", escape(&nodes[0].token));
        let _ = writeln!(out, "    color=\"#dddddd\";");
        for n in nodes {
            let peripheries = if n.id == m.start { 2 } else { 1 };
            let _ = writeln!(
                out,
                "    \"{}\" [label=\"{}\", peripheries={peripheries}];",
                n.id,
                node_label(n.id)
            );
        }
        let _ = writeln!(out, "  }}");
    }
    for ids in rows.values() {
        let list: Vec<String> = ids.iter().map(|id| format!("\"{id}\"")).collect();
        let _ = writeln!(out, "  {{ rank=same; {} }}", list.join("; "));
    }
    for e in &route.edges {
        let heads: Vec<String> = e
            .heads
            .iter()
            .map(|h| format!("h{}:{:.3}", h.head, h.importance))
            .collect();
        let tooltip = format!("{:?} {:.4} {}", e.kind, e.importance, heads.join(" "));
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [penwidth={:.3}, color=\"{}\", tooltip=\"{}\"];",
            e.src,
            e.dst,
            pen_width(e.importance),
            edge_color(e.kind),
            escape(tooltip.trim_end())
        );
    }
    let _ = writeln!(out, "}}");
    out
}
