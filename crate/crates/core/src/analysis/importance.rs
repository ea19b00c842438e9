// SPDX-License-Identifier: MIT OR Apache-2.0

//! Component importance vectors and per-domain averages.

use serde::{Deserialize, Serialize};

use super::PromptContributions;
use crate::error::{Error, Result};

/// Importance of every component for one position: `L * H` head totals
/// (layer-major) followed by `L` feed-forward importances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub position: usize,
    pub values: Vec<f64>,
}

/// One vector per position, from raw (unpruned) importances.
pub fn importance_vectors(c: &PromptContributions) -> Vec<ImportanceVector> {
    let (nl, nh) = (c.n_layers(), c.n_heads());
    (0..c.seq_len())
        .map(|pos| {
            let mut values = Vec::with_capacity(nl * nh + nl);
            for l in 0..nl {
                for h in 0..nh {
                    values.push(c.head_total(l, h, pos));
                }
            }
            for l in 0..nl {
                values.push(c.ffn(l, pos));
            }
            ImportanceVector {
                position: pos,
                values,
            }
        })
        .collect()
}

/// Mean component importances per domain and their differences from a
/// baseline domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainImportance {
    pub names: Vec<String>,
    pub baseline: String,
    pub means: Vec<Vec<f64>>,
    /// `means[i] - means[baseline]`.
    pub diffs: Vec<Vec<f64>>,
}

/// Averages importance vectors over all positions of each corpus.
pub fn domain_importance(
    corpora: &[(String, Vec<PromptContributions>)],
    baseline: &str,
) -> Result<DomainImportance> {
    let mut names = Vec::new();
    let mut means: Vec<Vec<f64>> = Vec::new();
    for (name, prompts) in corpora {
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for p in prompts {
            for v in importance_vectors(p) {
                if sum.is_empty() {
                    sum = vec![0.0; v.values.len()];
                } else if sum.len() != v.values.len() {
                    return Err(Error::Dimension(format!(
                        "domain {name:?} mixes model shapes"
                    )));
                }
                for (s, x) in sum.iter_mut().zip(&v.values) {
                    *s += x;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty(format!("domain {name:?} has no positions")));
        }
        names.push(name.clone());
        means.push(sum.iter().map(|s| s / count as f64).collect());
    }
    let width = means.first().map_or(0, Vec::len);
    if means.iter().any(|m| m.len() != width) {
        return Err(Error::Dimension(
            "domains come from different model shapes".into(),
        ));
    }
    let b = names.iter().position(|n| n == baseline).ok_or_else(|| {
        Error::Parse(format!(
            "baseline domain {baseline:?} not among the corpora"
        ))
    })?;
    let diffs = means
        .iter()
        .map(|m| m.iter().zip(&means[b]).map(|(x, y)| x - y).collect())
        .collect();
    Ok(DomainImportance {
        names,
        baseline: baseline.to_string(),
        means,
        diffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> PromptContributions {
        let mut c = PromptContributions::zeros(2, 2, 2);
        c.set_sub(0, 0, 1, 0, 0.25);
        c.set_sub(0, 0, 1, 1, 0.125);
        c.set_sub(1, 1, 0, 0, 0.5);
        c.set_ffn(0, 1, 0.75);
        c.set_ffn(1, 0, 0.1);
        c
    }

    #[test]
    fn vectors_are_head_sums_then_ffn() {
        let v = importance_vectors(&fixture());
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].values, vec![0.0, 0.0, 0.0, 0.5, 0.0, 0.1]);
        assert_eq!(v[1].values, vec![0.375, 0.0, 0.0, 0.0, 0.75, 0.0]);
    }

    #[test]
    fn zero_table_gives_zero_vectors_of_fixed_length() {
        let v = importance_vectors(&PromptContributions::zeros(3, 4, 5));
        assert!(v
            .iter()
            .all(|x| x.values.len() == 3 * 4 + 3 && x.values.iter().all(|&y| y == 0.0)));
    }

    #[test]
    fn domain_means_and_diffs() {
        let mut single = PromptContributions::zeros(2, 2, 1);
        single.set_sub(1, 0, 0, 0, 0.4);
        let corpora = vec![
            ("a".to_string(), vec![fixture()]),
            ("b".to_string(), vec![single.clone()]),
            ("c".to_string(), vec![fixture()]),
        ];
        let d = domain_importance(&corpora, "a").unwrap();
        assert_eq!(d.means[0], vec![0.1875, 0.0, 0.0, 0.25, 0.375, 0.05]);
        assert_eq!(d.means[1], importance_vectors(&single)[0].values);
        assert_eq!(d.diffs[2], vec![0.0; 6]);
        assert!((d.diffs[1][2] - 0.4).abs() < 1e-12);
        assert!(domain_importance(&corpora, "zzz").is_err());
    }
}
