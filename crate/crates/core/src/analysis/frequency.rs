// SPDX-License-Identifier: MIT OR Apache-2.0

//! How often each head contributes a retained sub-edge to the routes.

use std::collections::HashSet;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationCache, Model};
use crate::routes::{default_start, extract_routes, RouteGraph};

/// Which junctions a frequency counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionFilter {
    /// Junctions at every position.
    All,
    /// Junctions at the last position only.
    Last,
}

/// Unit of counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyMode {
    /// A head is active for a prompt if it is active at any counted
    /// junction of that prompt's route.
    PerExample,
    /// Fraction of counted junctions at which the head is active.
    PerJunction,
}

impl FromStr for PositionFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "last" => Ok(Self::Last),
            _ => Err(Error::Parse(format!(
                "position filter must be all or last, got {s:?}"
            ))),
        }
    }
}

impl FromStr for FrequencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_example" | "per-example" => Ok(Self::PerExample),
            "per_junction" | "per-junction" => Ok(Self::PerJunction),
            _ => Err(Error::Parse(format!(
                "mode must be per_example or per_junction, got {s:?}"
            ))),
        }
    }
}

/// `n_layers x n_heads` values, 0-based layer (block) and head indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyMatrix {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Row-major by layer.
    pub values: Vec<f64>,
}

impl FrequencyMatrix {
    pub fn zeros(n_layers: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            values: vec![0.0; n_layers * n_heads],
        }
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.n_heads + head]
    }

    pub fn set(&mut self, layer: usize, head: usize, v: f64) {
        self.values[layer * self.n_heads + head] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(self.n_heads)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// `layer,head,value` CSV.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["layer", "head", "value"])
            .map_err(csv_err)?;
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                w.write_record([l.to_string(), h.to_string(), self.get(l, h).to_string()])
                    .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses `layer,head,value` CSV; every cell of the grid must appear
    /// exactly once.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r
            .headers()
            .map_err(|e| Error::Parse(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["layer", "head", "value"] {
            return Err(Error::Parse(format!(
                "expected header layer,head,value, got {headers:?}"
            )));
        }
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
            let l: usize = field(0)
                .parse()
                .map_err(|_| Error::Parse(format!("bad layer in {rec:?}")))?;
            let h: usize = field(1)
                .parse()
                .map_err(|_| Error::Parse(format!("bad head in {rec:?}")))?;
            let v: f64 = field(2)
                .parse()
                .map_err(|_| Error::Parse(format!("bad value in {rec:?}")))?;
            cells.push((l, h, v));
        }
        if cells.is_empty() {
            return Err(Error::Empty("frequency CSV has no rows".into()));
        }
        let n_layers = cells.iter().map(|c| c.0).max().unwrap_or(0) + 1;
        let n_heads = cells.iter().map(|c| c.1).max().unwrap_or(0) + 1;
        if cells.len() != n_layers * n_heads {
            return Err(Error::Parse(format!(
                "{} rows do not cover a {n_layers}x{n_heads} grid",
                cells.len()
            )));
        }
        let mut m = Self::zeros(n_layers, n_heads);
        let mut seen = HashSet::new();
        for (l, h, v) in cells {
            if !seen.insert((l, h)) {
                return Err(Error::Parse(format!("duplicate cell layer {l} head {h}")));
            }
            m.set(l, h, v);
        }
        Ok(m)
    }
}

/// Elementwise `task - contrastive`.
pub fn diff_frequencies(
    task: &FrequencyMatrix,
    contrastive: &FrequencyMatrix,
) -> Result<FrequencyMatrix> {
    if (task.n_layers, task.n_heads) != (contrastive.n_layers, contrastive.n_heads) {
        return Err(Error::Dimension(format!(
            "{}x{} vs {}x{} frequency matrices",
            task.n_layers, task.n_heads, contrastive.n_layers, contrastive.n_heads
        )));
    }
    Ok(FrequencyMatrix {
        n_layers: task.n_layers,
        n_heads: task.n_heads,
        values: task
            .values
            .iter()
            .zip(&contrastive.values)
            .map(|(a, b)| a - b)
            .collect(),
    })
}

/// Frequencies from already extracted routes. `seq_lens[i]` is the token
/// count of the prompt behind `routes[i]`.
pub fn frequency_from_routes(
    routes: &[RouteGraph],
    seq_lens: &[usize],
    n_layers: usize,
    n_heads: usize,
    filter: PositionFilter,
    mode: FrequencyMode,
) -> Result<FrequencyMatrix> {
    if routes.is_empty() {
        return Err(Error::Empty(
            "activation frequency needs at least one prompt".into(),
        ));
    }
    if routes.len() != seq_lens.len() {
        return Err(Error::Dimension(
            "one sequence length per route required".into(),
        ));
    }
    let mut counts = vec![0usize; n_layers * n_heads];
    let mut denom = 0usize;
    for (route, &n) in routes.iter().zip(seq_lens) {
        let counted = |pos: usize| filter == PositionFilter::All || pos + 1 == n;
        let mut active: HashSet<(usize, usize, usize)> = HashSet::new();
        for (layer, head, _src, dst) in route.sub_edges() {
            if counted(dst) && (1..=n_layers).contains(&layer) && head < n_heads {
                active.insert((layer - 1, head, dst));
            }
        }
        match mode {
            FrequencyMode::PerJunction => {
                denom += match filter {
                    PositionFilter::All => n,
                    PositionFilter::Last => 1,
                };
                for &(l, h, _) in &active {
                    counts[l * n_heads + h] += 1;
                }
            }
            FrequencyMode::PerExample => {
                denom += 1;
                let heads: HashSet<(usize, usize)> =
                    active.iter().map(|&(l, h, _)| (l, h)).collect();
                for (l, h) in heads {
                    counts[l * n_heads + h] += 1;
                }
            }
        }
    }
    Ok(FrequencyMatrix {
        n_layers,
        n_heads,
        values: counts.iter().map(|&c| c as f64 / denom as f64).collect(),
    })
}

/// Extracts the default route of every cache at `tau` and counts head
/// activations.
pub fn activation_frequency(
    model: &Model,
    caches: &[ActivationCache],
    tau: f64,
    renormalize: bool,
    filter: PositionFilter,
    mode: FrequencyMode,
) -> Result<FrequencyMatrix> {
    if caches.is_empty() {
        return Err(Error::Empty(
            "activation frequency needs at least one prompt".into(),
        ));
    }
    let routes = caches
        .par_iter()
        .map(|c| extract_routes(model, c, default_start(c), tau, renormalize))
        .collect::<Result<Vec<_>>>()?;
    let lens: Vec<usize> = caches.iter().map(ActivationCache::seq_len).collect();
    let cfg = model.config();
    frequency_from_routes(&routes, &lens, cfg.n_layers, cfg.n_heads, filter, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routes::{EdgeKind, HeadScore, NodeId, RouteEdge, RouteMeta, RouteNode};

    fn route(edges: Vec<(usize, usize, usize, Vec<usize>)>) -> RouteGraph {
        // (layer, src, dst, heads)
        let start = NodeId::after_layer(2, 1);
        RouteGraph {
            meta: RouteMeta {
                model: "f".into(),
                prompt: String::new(),
                tau: 0.1,
                start,
            },
            nodes: vec![RouteNode {
                id: start,
                token: String::new(),
            }],
            edges: edges
                .into_iter()
                .map(|(layer, src, dst, heads)| RouteEdge {
                    src: NodeId::residual(src, layer - 1),
                    dst: NodeId::after_attn(dst, layer),
                    kind: if src == dst {
                        EdgeKind::ResidualAttn
                    } else {
                        EdgeKind::Attn
                    },
                    importance: 0.5,
                    heads: heads
                        .into_iter()
                        .map(|head| HeadScore {
                            head,
                            importance: 0.5,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn single_junction_one_head() {
        let r = route(vec![(1, 0, 2, vec![1])]);
        for mode in [FrequencyMode::PerExample, FrequencyMode::PerJunction] {
            let m = frequency_from_routes(&[r.clone()], &[3], 1, 3, PositionFilter::Last, mode)
                .unwrap();
            assert_eq!(m.values, vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn per_junction_counts_positions() {
        let r = route(vec![(1, 0, 2, vec![0]), (1, 0, 1, vec![0, 1])]);
        let m = frequency_from_routes(
            &[r.clone()],
            &[3],
            1,
            2,
            PositionFilter::All,
            FrequencyMode::PerJunction,
        )
        .unwrap();
        assert_eq!(m.values, vec![2.0 / 3.0, 1.0 / 3.0]);
        let m = frequency_from_routes(
            &[r],
            &[3],
            1,
            2,
            PositionFilter::All,
            FrequencyMode::PerExample,
        )
        .unwrap();
        assert_eq!(m.values, vec![1.0, 1.0]);
    }

    #[test]
    fn two_prompts_average() {
        let a = route(vec![(1, 0, 2, vec![0]), (2, 1, 2, vec![1])]);
        let b = route(vec![(1, 1, 2, vec![0, 1])]);
        let m = frequency_from_routes(
            &[a, b],
            &[3, 3],
            2,
            2,
            PositionFilter::Last,
            FrequencyMode::PerExample,
        )
        .unwrap();
        assert_eq!(m.values, vec![1.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(frequency_from_routes(
            &[],
            &[],
            1,
            1,
            PositionFilter::All,
            FrequencyMode::PerExample
        )
        .is_err());
    }

    #[test]
    fn diff_properties() {
        let a = FrequencyMatrix {
            n_layers: 1,
            n_heads: 3,
            values: vec![0.5, 0.25, 1.0],
        };
        let b = FrequencyMatrix {
            n_layers: 1,
            n_heads: 3,
            values: vec![0.25, 0.5, 1.0],
        };
        assert_eq!(diff_frequencies(&a, &a).unwrap().values, vec![0.0; 3]);
        assert_eq!(
            diff_frequencies(&a, &b).unwrap().values,
            vec![0.25, -0.25, 0.0]
        );
        let ab = diff_frequencies(&a, &b).unwrap();
        let ba = diff_frequencies(&b, &a).unwrap();
        assert!(ab.values.iter().zip(&ba.values).all(|(x, y)| *x == -*y));
        let c = FrequencyMatrix::zeros(2, 3);
        assert!(diff_frequencies(&a, &c).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let m = FrequencyMatrix {
            n_layers: 2,
            n_heads: 2,
            values: vec![0.1, 0.2, 1.0 / 3.0, 0.0],
        };
        let text = m.to_csv().unwrap();
        assert!(text.starts_with("layer,head,value\n0,0,0.1\n"));
        assert_eq!(FrequencyMatrix::from_csv(&text).unwrap(), m);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(FrequencyMatrix::from_csv("a,b,c\n0,0,1\n").is_err());
        assert!(FrequencyMatrix::from_csv("layer,head,value\n0,0,1\n0,0,2\n").is_err());
        assert!(FrequencyMatrix::from_csv("layer,head,value\n0,1,1\n").is_err());
        assert!(FrequencyMatrix::from_csv("layer,head,value\n").is_err());
        assert!(FrequencyMatrix::from_csv("layer,head,value\n0,0,x\n").is_err());
    }

    #[test]
    fn parse_modes() {
        assert_eq!(
            "last".parse::<PositionFilter>().unwrap(),
            PositionFilter::Last
        );
        assert_eq!(
            "per-junction".parse::<FrequencyMode>().unwrap(),
            FrequencyMode::PerJunction
        );
        assert!("some".parse::<PositionFilter>().is_err());
    }
}
