// SPDX-License-Identifier: MIT OR Apache-2.0

//! Previous-token and subword-merging head classification.
//!
//! A head's influence on a source is its head-internal share: the
//! sub-edge importance from that source divided by the head's total
//! importance at the junction.

use serde::{Deserialize, Serialize};

use super::frequency::FrequencyMatrix;
use super::PromptContributions;
use crate::error::{Error, Result};

/// Ratios are compared with this slack so that, e.g., 7 of 10 counts as
/// 70%.
const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyThresholds {
    /// Share a case must exceed.
    pub share: f64,
    /// Fraction of cases that must qualify.
    pub case: f64,
    /// Largest total importance on first subwords, in importance units.
    pub first_subword_cap: f64,
}

impl Default for TaxonomyThresholds {
    fn default() -> Self {
        Self {
            share: 0.5,
            case: 0.7,
            first_subword_cap: 0.005,
        }
    }
}

fn check_shapes(corpus: &[PromptContributions]) -> Result<(usize, usize)> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::Empty("head classification needs at least one prompt".into()))?;
    let dims = (first.n_layers(), first.n_heads());
    if corpus.iter().any(|c| (c.n_layers(), c.n_heads()) != dims) {
        return Err(Error::Dimension(
            "prompts come from different model shapes".into(),
        ));
    }
    Ok(dims)
}

fn meets(qualifying: usize, cases: usize, fraction: f64) -> bool {
    cases > 0 && qualifying as f64 / cases as f64 >= fraction - RATIO_SLACK
}

/// `flags[layer][head]`: more than `share` of the influence on the
/// previous token in at least `case` of the positions `pos >= 1`.
pub fn classify_prev_token_heads(
    corpus: &[PromptContributions],
    th: &TaxonomyThresholds,
) -> Result<Vec<Vec<bool>>> {
    let (nl, nh) = check_shapes(corpus)?;
    let mut flags = vec![vec![false; nh]; nl];
    for (l, row) in flags.iter_mut().enumerate() {
        for (h, flag) in row.iter_mut().enumerate() {
            let (mut cases, mut qualifying) = (0, 0);
            for c in corpus {
                for pos in 1..c.seq_len() {
                    cases += 1;
                    if c.share(l, h, pos, |j| j + 1 == pos) > th.share {
                        qualifying += 1;
                    }
                }
            }
            *flag = meets(qualifying, cases, th.case);
        }
    }
    Ok(flags)
}

/// `flags[layer][head]`: later subwords draw more than `share` of the
/// head's influence from earlier subwords of the same word in at least
/// `case` of cases, the head's total importance on first subwords is at
/// most `first_subword_cap` in at least `case` of cases, and the head is
/// not a previous-token head.
pub fn classify_subword_merge_heads(
    corpus: &[PromptContributions],
    th: &TaxonomyThresholds,
) -> Result<Vec<Vec<bool>>> {
    let (nl, nh) = check_shapes(corpus)?;
    if corpus.iter().any(|c| c.word_ids.is_none()) {
        return Err(Error::Parse(
            "subword classification needs word metadata".into(),
        ));
    }
    let prev = classify_prev_token_heads(corpus, th)?;
    let mut flags = vec![vec![false; nh]; nl];
    for (l, row) in flags.iter_mut().enumerate() {
        for (h, flag) in row.iter_mut().enumerate() {
            let (mut later, mut later_ok, mut first, mut first_ok) = (0, 0, 0, 0);
            for c in corpus {
                let words = c.word_ids.as_ref().expect("checked above");
                for pos in 0..c.seq_len() {
                    let is_first = pos == 0 || words[pos] != words[pos - 1];
                    if is_first {
                        first += 1;
                        if c.head_total(l, h, pos) <= th.first_subword_cap {
                            first_ok += 1;
                        }
                    } else {
                        later += 1;
                        let same = c.share(l, h, pos, |j| j < pos && words[j] == words[pos]);
                        if same > th.share {
                            later_ok += 1;
                        }
                    }
                }
            }
            *flag =
                meets(later_ok, later, th.case) && meets(first_ok, first, th.case) && !prev[l][h];
        }
    }
    Ok(flags)
}

/// Per-head summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub activation_frequency: f64,
    /// Mean of the head's raw total importance over all junctions.
    pub mean_importance: f64,
    pub prev_token_flag: bool,
    pub subword_merge_flag: bool,
    /// Number of junctions behind `mean_importance`.
    pub sample_count: usize,
}

/// Combines frequencies and taxonomy flags into one row per head.
pub fn head_stats(
    corpus: &[PromptContributions],
    frequency: &FrequencyMatrix,
    th: &TaxonomyThresholds,
) -> Result<Vec<HeadStats>> {
    let (nl, nh) = check_shapes(corpus)?;
    if (frequency.n_layers, frequency.n_heads) != (nl, nh) {
        return Err(Error::Dimension(
            "frequency matrix does not match the corpus".into(),
        ));
    }
    let prev = classify_prev_token_heads(corpus, th)?;
    let merge = if corpus.iter().all(|c| c.word_ids.is_some()) {
        classify_subword_merge_heads(corpus, th)?
    } else {
        vec![vec![false; nh]; nl]
    };
    let mut out = Vec::with_capacity(nl * nh);
    for l in 0..nl {
        for h in 0..nh {
            let (mut sum, mut count) = (0.0, 0);
            for c in corpus {
                for pos in 0..c.seq_len() {
                    sum += c.head_total(l, h, pos);
                    count += 1;
                }
            }
            out.push(HeadStats {
                layer: l,
                head: h,
                activation_frequency: frequency.get(l, h),
                mean_importance: if count > 0 { sum / count as f64 } else { 0.0 },
                prev_token_flag: prev[l][h],
                subword_merge_flag: merge[l][h],
                sample_count: count,
            });
        }
    }
    Ok(out)
}
