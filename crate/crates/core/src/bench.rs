// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wall-clock timing of forward passes and route extraction.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Prompt;
use crate::error::{Error, Result};
use crate::model::{ActivationCache, Model};
use crate::routes::{default_start, extract_routes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub index: usize,
    pub n_tokens: usize,
    pub tokenize_ms: f64,
    pub forward_ms: f64,
    pub extraction_ms: f64,
    pub nodes: usize,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub tau: f64,
    pub renormalize: bool,
    pub prompts: usize,
    pub forward_calls: usize,
    pub tokenize_ms: f64,
    pub forward_ms: f64,
    pub extraction_ms: f64,
    pub total_ms: f64,
    pub per_example_ms: f64,
    pub entries: Vec<BenchEntry>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs tokenization, one forward pass and extraction from the default
/// start node for every prompt, sequentially on the calling thread.
pub fn run_bench(
    model: &Model,
    prompts: &[Prompt],
    tau: f64,
    renormalize: bool,
) -> Result<BenchReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("benchmark corpus has no prompts".into()));
    }
    let calls_before = model.forward_calls();
    let started = Instant::now();
    let mut entries = Vec::with_capacity(prompts.len());
    for (index, p) in prompts.iter().enumerate() {
        let t = Instant::now();
        let seq = p.tokens(model)?;
        let tokenize_ms = ms(t);
        let t = Instant::now();
        let cache = model.forward(&seq)?;
        let forward_ms = ms(t);
        let t = Instant::now();
        let g = extract_routes(model, &cache, default_start(&cache), tau, renormalize)?;
        let extraction_ms = ms(t);
        entries.push(BenchEntry {
            index,
            n_tokens: seq.len(),
            tokenize_ms,
            forward_ms,
            extraction_ms,
            nodes: g.nodes.len(),
            edges: g.edges.len(),
        });
    }
    let total_ms = ms(started);
    let sum = |f: fn(&BenchEntry) -> f64| entries.iter().map(f).sum::<f64>();
    Ok(BenchReport {
        model: model.name().to_string(),
        tau,
        renormalize,
        prompts: prompts.len(),
        forward_calls: model.forward_calls() - calls_before,
        tokenize_ms: sum(|e| e.tokenize_ms),
        forward_ms: sum(|e| e.forward_ms),
        extraction_ms: sum(|e| e.extraction_ms),
        total_ms,
        per_example_ms: total_ms / prompts.len() as f64,
        entries,
    })
}

/// Time to extract routes from already-built caches, in milliseconds.
pub fn time_extraction(
    model: &Model,
    caches: &[ActivationCache],
    tau: f64,
    renormalize: bool,
) -> Result<f64> {
    let t = Instant::now();
    for c in caches {
        extract_routes(model, c, default_start(c), tau, renormalize)?;
    }
    Ok(ms(t))
}

impl BenchReport {
    /// Human-readable summary.
    pub fn summary(&self) -> String {
        format!(
            "model {}\nprompts {}\ntau {}\nforward passes {}\ntokenize {:.1} ms\nforward {:.1} ms\nextraction {:.1} ms\ntotal {:.1} ms\nper example {:.1} ms\n",
            self.model,
            self.prompts,
            self.tau,
            self.forward_calls,
            self.tokenize_ms,
            self.forward_ms,
            self.extraction_ms,
            self.total_ms,
            self.per_example_ms
        )
    }
}
