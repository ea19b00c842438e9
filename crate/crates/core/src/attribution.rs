// SPDX-License-Identifier: MIT OR Apache-2.0

//! Proximity importance of summands, sub-edge scores and their
//! aggregation into edge importances.

use serde::{Deserialize, Serialize};

use crate::decomposition::{AttnProximities, EdgeVectors, FfnProximities, TermSource};
use crate::error::{Error, Result};
use crate::routes::NodeId;

/// `max(|y|_1 - |z - y|_1, 0)`.
pub fn proximity(z: &[f64], y: &[f64]) -> f64 {
    let norm: f64 = y.iter().map(|v| v.abs()).sum();
    let dist: f64 = z.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
    (norm - dist).max(0.0)
}

/// Normalizes proximities to sum to one. All-zero input yields a uniform
/// split.
pub fn normalize_proximities(prox: &[f64]) -> Result<Vec<f64>> {
    if prox.is_empty() {
        return Err(Error::Empty(
            "importance split needs at least one term".into(),
        ));
    }
    let total: f64 = prox.iter().sum();
    if total > 0.0 {
        Ok(prox.iter().map(|p| p / total).collect())
    } else {
        log::debug!(
            "all {} proximities are zero, splitting uniformly",
            prox.len()
        );
        Ok(vec![1.0 / prox.len() as f64; prox.len()])
    }
}

/// Importance of each term for `target`.
pub fn importance_split(terms: &[Vec<f64>], target: &[f64]) -> Result<Vec<f64>> {
    if let Some(t) = terms.iter().find(|t| t.len() != target.len()) {
        return Err(Error::Dimension(format!(
            "term of length {} for target of length {}",
            t.len(),
            target.len()
        )));
    }
    let prox: Vec<f64> = terms.iter().map(|t| proximity(t, target)).collect();
    normalize_proximities(&prox)
}

/// One head's contribution from `src_pos` into `dst_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubEdgeScore {
    /// Node layer of the destination (1-based).
    pub layer: usize,
    pub head: usize,
    pub dst_pos: usize,
    pub src_pos: usize,
    pub importance: f64,
}

/// Scored incoming edges of one junction.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeImportances {
    pub node: NodeId,
    pub n_heads: usize,
    /// `e^h_{pos,j}` head-major, `n_heads * (pos + 1)`; empty at FFN
    /// junctions.
    pub sub_edges: Vec<f64>,
    /// `e^res` (attention junction) or `e_res` (FFN junction).
    pub residual: f64,
    /// `e_ffn`, FFN junctions only.
    pub ffn: Option<f64>,
    /// Share of the bias pseudo-term before it was dropped.
    pub dropped_bias_mass: f64,
}

impl EdgeImportances {
    pub fn is_attention(&self) -> bool {
        self.ffn.is_none()
    }

    fn width(&self) -> usize {
        self.node.pos + 1
    }

    /// `e^h_{pos,j}`.
    pub fn sub(&self, head: usize, src: usize) -> f64 {
        self.sub_edges[head * self.width() + src]
    }

    /// `e^attn_{pos,j}`: the sum over heads, plus `e^res` at `j = pos`.
    pub fn attn(&self, src: usize) -> f64 {
        let w = self.width();
        let heads: f64 = (0..self.n_heads).map(|h| self.sub_edges[h * w + src]).sum();
        if src == self.node.pos {
            heads + self.residual
        } else {
            heads
        }
    }

    /// `sum_j e^h_{pos,j}`.
    pub fn head_total(&self, head: usize) -> f64 {
        let w = self.width();
        self.sub_edges[head * w..(head + 1) * w].iter().sum()
    }

    /// Sum of all aggregated edge importances of the junction.
    pub fn total(&self) -> f64 {
        self.sub_edges.iter().sum::<f64>() + self.residual + self.ffn.unwrap_or(0.0)
    }

    pub fn sub_edge_scores(&self) -> impl Iterator<Item = SubEdgeScore> + '_ {
        let w = self.width();
        self.sub_edges
            .iter()
            .enumerate()
            .map(move |(i, &importance)| SubEdgeScore {
                layer: self.node.layer,
                head: i / w,
                dst_pos: self.node.pos,
                src_pos: i % w,
                importance,
            })
    }
}

/// Scores an attention junction from summand proximities.
///
/// The bias share is dropped and the rest renormalized. With
/// `renormalize`, sub-edges and the residual below `tau` are zeroed and the
/// survivors renormalized again.
pub fn attn_importances_from_proximities(
    prox: &AttnProximities,
    tau: f64,
    renormalize: bool,
) -> EdgeImportances {
    let m = prox.heads.len();
    let mut all = Vec::with_capacity(m + 2);
    all.extend_from_slice(&prox.heads);
    all.push(prox.residual);
    all.push(prox.bias);
    let split = normalize_proximities(&all).expect("at least residual and bias");
    let bias_mass = split[m + 1];
    let mut kept = split[..=m].to_vec();
    let rest: f64 = kept.iter().sum();
    if rest > 0.0 {
        kept.iter_mut().for_each(|v| *v /= rest);
    } else {
        log::debug!(
            "{}: no mass outside the bias term, splitting uniformly",
            prox.node
        );
        kept.iter_mut().for_each(|v| *v = 1.0 / (m + 1) as f64);
    }
    if renormalize {
        kept.iter_mut().filter(|v| **v < tau).for_each(|v| *v = 0.0);
        let survivors: f64 = kept.iter().sum();
        if survivors > 0.0 {
            kept.iter_mut().for_each(|v| *v /= survivors);
        }
    }
    let residual = kept.pop().expect("residual entry");
    EdgeImportances {
        node: prox.node,
        n_heads: prox.n_heads,
        sub_edges: kept,
        residual,
        ffn: None,
        dropped_bias_mass: bias_mass,
    }
}

/// Scores a feed-forward junction: `e_res + e_ffn = 1`.
pub fn ffn_importances_from_proximities(prox: &FfnProximities) -> EdgeImportances {
    let split = normalize_proximities(&[prox.residual, prox.ffn]).expect("two terms");
    EdgeImportances {
        node: prox.node,
        n_heads: 0,
        sub_edges: Vec::new(),
        residual: split[0],
        ffn: Some(split[1]),
        dropped_bias_mass: 0.0,
    }
}

/// Scores an attention junction from materialized summands.
pub fn attn_edge_importances(
    ev: &EdgeVectors,
    tau: f64,
    renormalize: bool,
) -> Result<EdgeImportances> {
    let pos = ev.node.pos;
    let n_heads = ev
        .terms
        .iter()
        .filter_map(|t| match t.source {
            TermSource::Head { head, .. } => Some(head + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let y = &ev.target;
    let mut heads = vec![0.0; n_heads * (pos + 1)];
    let (mut residual, mut bias) = (0.0, 0.0);
    for t in &ev.terms {
        let p = proximity(&t.vector, y);
        match t.source {
            TermSource::Head { head, src } if src <= pos => heads[head * (pos + 1) + src] = p,
            TermSource::Residual => residual = p,
            TermSource::Bias => bias = p,
            other => {
                return Err(Error::InvalidNode(format!(
                    "{other:?} is not a summand of attention junction {}",
                    ev.node
                )))
            }
        }
    }
    Ok(attn_importances_from_proximities(
        &AttnProximities {
            node: ev.node,
            n_heads,
            heads,
            residual,
            bias,
        },
        tau,
        renormalize,
    ))
}

/// Scores a feed-forward junction from materialized summands.
pub fn ffn_edge_importances(ev: &EdgeVectors) -> Result<EdgeImportances> {
    let y = &ev.target;
    let get = |s: TermSource| {
        ev.term(s)
            .map(|v| proximity(v, y))
            .ok_or_else(|| Error::InvalidNode(format!("{} lacks a {s:?} summand", ev.node)))
    };
    Ok(ffn_importances_from_proximities(&FfnProximities {
        node: ev.node,
        residual: get(TermSource::Residual)?,
        ffn: get(TermSource::Ffn)?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::Term;
    use proptest::prelude::*;

    #[test]
    fn proximity_examples() {
        let y = [1.0, -2.0, 3.0];
        assert_eq!(proximity(&y, &y), 6.0);
        assert_eq!(proximity(&[0.0; 3], &y), 0.0);
        assert_eq!(proximity(&[-1.0, 2.0, -3.0], &y), 0.0);
    }

    #[test]
    fn split_examples() {
        assert_eq!(
            importance_split(&[vec![1.0, 2.0]], &[1.0, 2.0]).unwrap(),
            vec![1.0]
        );
        let s = importance_split(
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            &[1.0, 1.0, 0.0],
        )
        .unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = importance_split(&[vec![3.0, 0.0], vec![-1.0, 0.0]], &[2.0, 0.0]).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
    }

    #[test]
    fn split_rejects_empty_and_mismatched() {
        assert!(importance_split(&[], &[1.0]).is_err());
        assert!(importance_split(&[vec![1.0]], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn all_zero_proximities_split_uniformly() {
        assert_eq!(normalize_proximities(&[0.0; 4]).unwrap(), vec![0.25; 4]);
    }

    fn prox(
        heads: Vec<f64>,
        n_heads: usize,
        pos: usize,
        residual: f64,
        bias: f64,
    ) -> AttnProximities {
        AttnProximities {
            node: NodeId::after_attn(pos, 1),
            n_heads,
            heads,
            residual,
            bias,
        }
    }

    #[test]
    fn bias_mass_is_dropped_and_rest_renormalized() {
        let e =
            attn_importances_from_proximities(&prox(vec![1.0, 1.0], 1, 1, 2.0, 4.0), 0.0, false);
        assert!((e.dropped_bias_mass - 0.5).abs() < 1e-12);
        assert_eq!(e.sub_edges, vec![0.25, 0.25]);
        assert_eq!(e.residual, 0.5);
        assert!((e.attn(0) - 0.25).abs() < 1e-12);
        assert!((e.attn(1) - 0.75).abs() < 1e-12);
        assert!((e.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pruning_below_tau_rescales_survivors() {
        // sub-edges 0.5, 0.2 and residual 0.3 at tau 0.3: 0.2 goes, the rest
        // are divided by 0.8
        let e = attn_importances_from_proximities(&prox(vec![5.0, 2.0], 2, 0, 3.0, 0.0), 0.3, true);
        assert_eq!(e.sub_edges[1], 0.0);
        assert!((e.sub_edges[0] - 0.625).abs() < 1e-12);
        assert!((e.residual - 0.375).abs() < 1e-12);
    }

    #[test]
    fn zero_model_puts_all_mass_on_residual() {
        let e =
            attn_importances_from_proximities(&prox(vec![0.0, 0.0], 2, 0, 5.0, 0.0), 0.04, true);
        assert_eq!(e.attn(0), 1.0);
        assert_eq!(e.residual, 1.0);
    }

    #[test]
    fn ffn_examples() {
        let node = NodeId::after_layer(0, 1);
        let ev = |ffn: Vec<f64>| EdgeVectors {
            node,
            target: vec![1.0 + ffn[0], -2.0 + ffn[1]],
            terms: vec![
                Term {
                    source: TermSource::Residual,
                    vector: vec![1.0, -2.0],
                },
                Term {
                    source: TermSource::Ffn,
                    vector: ffn,
                },
            ],
        };
        let e = ffn_edge_importances(&ev(vec![0.0, 0.0])).unwrap();
        assert_eq!((e.residual, e.ffn), (1.0, Some(0.0)));
        let e = ffn_edge_importances(&ev(vec![1.0, -2.0])).unwrap();
        assert_eq!((e.residual, e.ffn), (0.5, Some(0.5)));
    }

    #[test]
    fn materialized_matches_proximity_path() {
        let node = NodeId::after_attn(1, 1);
        let terms = vec![
            Term {
                source: TermSource::Head { head: 0, src: 0 },
                vector: vec![1.0, 0.5],
            },
            Term {
                source: TermSource::Head { head: 0, src: 1 },
                vector: vec![-0.5, 0.5],
            },
            Term {
                source: TermSource::Residual,
                vector: vec![2.0, 0.0],
            },
            Term {
                source: TermSource::Bias,
                vector: vec![0.1, 0.1],
            },
        ];
        let target = vec![2.6, 1.1];
        let ev = EdgeVectors {
            node,
            target,
            terms,
        };
        let e = attn_edge_importances(&ev, 0.0, false).unwrap();
        let y = ev.sum();
        let p: Vec<f64> = ev.terms.iter().map(|t| proximity(&t.vector, &y)).collect();
        let kept: f64 = p[..3].iter().sum();
        assert!((e.sub(0, 0) - p[0] / kept).abs() < 1e-12);
        assert!((e.residual - p[2] / kept).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn proximity_scales_with_positive_factor(
            z in prop::collection::vec(-5.0f64..5.0, 6),
            y in prop::collection::vec(-5.0f64..5.0, 6),
            c in 0.01f64..50.0,
        ) {
            let zc: Vec<f64> = z.iter().map(|v| v * c).collect();
            let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
            let a = proximity(&zc, &yc);
            let b = c * proximity(&z, &y);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }

        #[test]
        fn junction_importances_are_normalized(
            heads in prop::collection::vec(0.0f64..3.0, 6),
            residual in 0.0f64..3.0,
            bias in 0.0f64..3.0,
            tau in 0.0f64..0.6,
            renormalize in any::<bool>(),
        ) {
            let e = attn_importances_from_proximities(&prox(heads, 2, 2, residual, bias), tau, renormalize);
            let total = e.total();
            prop_assert!(total == 0.0 || (total - 1.0).abs() < 1e-9);
            for j in 0..3 {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&e.attn(j)));
            }
        }

        #[test]
        fn raising_tau_never_adds_survivors(
            heads in prop::collection::vec(0.0f64..3.0, 8),
            residual in 0.0f64..3.0,
            t1 in 0.0f64..0.5,
            dt in 0.0f64..0.5,
        ) {
            let p = prox(heads, 2, 3, residual, 0.1);
            let count = |tau: f64, renorm: bool| {
                let e = attn_importances_from_proximities(&p, tau, renorm);
                e.sub_edges.iter().filter(|&&v| v >= tau && v > 0.0).count()
            };
            for renorm in [false, true] {
                prop_assert!(count(t1 + dt, renorm) <= count(t1, renorm));
            }
        }
    }
}
