// SPDX-License-Identifier: MIT OR Apache-2.0

//! Corpus-level analyses over raw junction importances and extracted
//! routes.
//!
//! Layer indices in this module are 0-based block indices.

mod export;
mod frequency;
mod importance;
mod svd;
mod taxonomy;

pub use export::{attention_csv, export_attention_map, importance_vectors_csv};
pub use frequency::{
    activation_frequency, diff_frequencies, frequency_from_routes, FrequencyMatrix, FrequencyMode,
    PositionFilter,
};
pub use importance::{domain_importance, importance_vectors, DomainImportance, ImportanceVector};
pub use svd::{
    head_ov_svd, svd_head_tokens, svd_report_csv, svd_report_text, SingularDirection, TokenScore,
    DEFAULT_TOP_K, SINGULAR_INDICES,
};
pub use taxonomy::{
    classify_prev_token_heads, classify_subword_merge_heads, head_stats, HeadStats,
    TaxonomyThresholds,
};

use crate::attribution::{attn_importances_from_proximities, ffn_importances_from_proximities};
use crate::decomposition::Decomposer;
use crate::error::{Error, Result};
use crate::model::{ActivationCache, Model};

/// Threshold used for activation frequencies when none is given.
pub const DEFAULT_FREQUENCY_TAU: f64 = 0.01;

/// Raw (unpruned, bias-dropped) junction importances of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContributions {
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    /// `e^{l,h}_{pos,j}` at `((l * n + pos) * H + h) * n + j`, zero for
    /// `j > pos`.
    sub: Vec<f64>,
    /// `e^{ffn_l}_pos` at `l * n + pos`.
    ffn: Vec<f64>,
    pub tokens: Vec<String>,
    pub word_ids: Option<Vec<usize>>,
    pub is_first_subword: Option<Vec<bool>>,
}

impl PromptContributions {
    /// All-zero table, to be filled with [`PromptContributions::set_sub`].
    pub fn zeros(n_layers: usize, n_heads: usize, seq_len: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            seq_len,
            sub: vec![0.0; n_layers * seq_len * n_heads * seq_len],
            ffn: vec![0.0; n_layers * seq_len],
            tokens: (0..seq_len).map(|i| format!("<{i}>")).collect(),
            word_ids: None,
            is_first_subword: None,
        }
    }

    /// Scores every junction of a cached forward pass.
    pub fn from_cache(model: &Model, cache: &ActivationCache) -> Result<Self> {
        let dec = Decomposer::new(model, cache)?;
        let (nl, nh, n) = (cache.n_layers(), model.config().n_heads, cache.seq_len());
        let mut out = Self::zeros(nl, nh, n);
        for l in 0..nl {
            for pos in 0..n {
                let imp = attn_importances_from_proximities(
                    &dec.attn_proximities(l + 1, pos)?,
                    0.0,
                    false,
                );
                for h in 0..nh {
                    for j in 0..=pos {
                        let i = out.index(l, h, pos, j);
                        out.sub[i] = imp.sub(h, j);
                    }
                }
                let f = ffn_importances_from_proximities(&dec.ffn_proximities(l + 1, pos)?);
                out.ffn[l * n + pos] = f.ffn.unwrap_or(0.0);
            }
        }
        let t = cache.tokens();
        out.tokens = t.strings.clone();
        out.word_ids = Some(t.word_ids.clone());
        out.is_first_subword = Some(t.is_first_subword.clone());
        Ok(out)
    }

    /// Attaches word grouping (for fixtures).
    pub fn with_words(mut self, word_ids: Vec<usize>) -> Result<Self> {
        if word_ids.len() != self.seq_len {
            return Err(Error::Dimension(format!(
                "{} word ids for {} positions",
                word_ids.len(),
                self.seq_len
            )));
        }
        let first = (0..word_ids.len())
            .map(|i| i == 0 || word_ids[i] != word_ids[i - 1])
            .collect();
        self.word_ids = Some(word_ids);
        self.is_first_subword = Some(first);
        Ok(self)
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn index(&self, l: usize, h: usize, pos: usize, j: usize) -> usize {
        ((l * self.seq_len + pos) * self.n_heads + h) * self.seq_len + j
    }

    /// `e^{l,h}_{pos,j}`.
    pub fn sub(&self, l: usize, h: usize, pos: usize, j: usize) -> f64 {
        self.sub[self.index(l, h, pos, j)]
    }

    pub fn set_sub(&mut self, l: usize, h: usize, pos: usize, j: usize, v: f64) {
        assert!(j <= pos, "sub-edge from a later position");
        let i = self.index(l, h, pos, j);
        self.sub[i] = v;
    }

    pub fn ffn(&self, l: usize, pos: usize) -> f64 {
        self.ffn[l * self.seq_len + pos]
    }

    pub fn set_ffn(&mut self, l: usize, pos: usize, v: f64) {
        self.ffn[l * self.seq_len + pos] = v;
    }

    /// `sum_j e^{l,h}_{pos,j}`.
    pub fn head_total(&self, l: usize, h: usize, pos: usize) -> f64 {
        let start = self.index(l, h, pos, 0);
        self.sub[start..start + pos + 1].iter().sum()
    }

    /// Fraction of the head's importance at `pos` that comes from sources
    /// selected by `pick`; zero when the head contributes nothing.
    pub fn share(&self, l: usize, h: usize, pos: usize, pick: impl Fn(usize) -> bool) -> f64 {
        let total = self.head_total(l, h, pos);
        if total <= 0.0 {
            return 0.0;
        }
        let part: f64 = (0..=pos)
            .filter(|&j| pick(j))
            .map(|j| self.sub(l, h, pos, j))
            .sum();
        part / total
    }
}
