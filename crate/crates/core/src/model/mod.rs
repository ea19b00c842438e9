// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with complete activation caching.

pub mod config;
pub mod forward;
pub mod toy;
pub mod weights;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

pub use config::{FfnKind, ModelConfig, Naming, NormKind, PosKind};
pub use forward::{next_token, ActivationCache, LayerCache, NormStats};
pub use weights::{load_safetensors, save_safetensors, LayerWeights, ModelWeights, NormWeights};

use crate::error::{Error, Result};
use crate::tokenizer::{raw_ids, TokenSeq, Tokenizer};

/// Reads `config.json` and `model.safetensors` from `dir`.
pub fn load_model(dir: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let config_path = dir.join("config.json");
    let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let cfg = ModelConfig::from_json_str(&text)?;
    let weights = load_safetensors(&dir.join("model.safetensors"), &cfg)?;
    Ok((cfg, weights))
}

/// A loaded model. Immutable apart from the forward-call counter.
#[derive(Debug)]
pub struct Model {
    name: String,
    config: ModelConfig,
    weights: ModelWeights,
    tokenizer: Option<Tokenizer>,
    forward_calls: AtomicUsize,
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        config: ModelConfig,
        weights: ModelWeights,
        tokenizer: Option<Tokenizer>,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        let tokenizer = tokenizer.map(|t| t.with_bos(config.bos_token_id, config.prepend_bos));
        Ok(Self {
            name: name.into(),
            config,
            weights,
            tokenizer,
            forward_calls: AtomicUsize::new(0),
        })
    }

    /// Loads a model directory; `vocab.json`/`merges.txt` are optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let (config, weights) = load_model(dir)?;
        let tokenizer = if dir.join("vocab.json").exists() {
            Some(Tokenizer::from_dir(dir)?)
        } else {
            None
        };
        let name = dir.file_name().map_or_else(
            || dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        Self::new(name, config, weights, tokenizer)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn tokenizer(&self) -> Option<&Tokenizer> {
        self.tokenizer.as_ref()
    }

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn forward(&self, tokens: &TokenSeq) -> Result<ActivationCache> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        forward::run(self, tokens)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        self.tokenizer
            .as_ref()
            .ok_or_else(|| Error::Encoding("model has no tokenizer files".into()))?
            .encode(text)
    }

    /// Token sequence for pre-tokenized input. Without tokenizer files every
    /// id is its own word.
    pub fn tokens_from_ids(&self, ids: &[u32], word_ids: Option<Vec<usize>>) -> Result<TokenSeq> {
        match &self.tokenizer {
            Some(t) => {
                if let Some(&id) = ids
                    .iter()
                    .find(|&&id| id as usize >= self.config.vocab_size)
                {
                    return Err(Error::Vocabulary {
                        id,
                        vocab_size: self.config.vocab_size,
                    });
                }
                t.from_ids(ids, word_ids)
            }
            None => {
                let seq = raw_ids(ids, self.config.vocab_size)?;
                match word_ids {
                    Some(w) => TokenSeq::with_words(seq.ids, seq.strings, w, false),
                    None => Ok(seq),
                }
            }
        }
    }

    /// Display string of a token id.
    pub fn token_string(&self, id: u32) -> String {
        self.tokenizer
            .as_ref()
            .and_then(|t| t.id_to_string(id))
            .unwrap_or_else(|| format!("<{id}>"))
    }
}
