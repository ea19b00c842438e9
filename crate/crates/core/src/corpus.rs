// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt corpora: plain-text files and the indirect-object templates.
//!
//! A corpus file holds one prompt per line. Blank lines and lines whose
//! first non-space character is `#` are skipped. In id mode each line is a
//! list of space-separated token ids.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::TokenSeq;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    Text(String),
    Ids(Vec<u32>),
}

impl Prompt {
    pub fn tokens(&self, model: &Model) -> Result<TokenSeq> {
        match self {
            Prompt::Text(s) => model.encode(s),
            Prompt::Ids(ids) => model.tokens_from_ids(ids, None),
        }
    }
}

fn parse_ids(line: &str, lineno: usize) -> Result<Vec<u32>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| Error::Parse(format!("line {lineno}: {t:?} is not a token id")))
        })
        .collect()
}

/// Parses corpus text.
pub fn parse_corpus(text: &str, ids: bool) -> Result<Vec<Prompt>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(if ids {
            Prompt::Ids(parse_ids(trimmed, i + 1)?)
        } else {
            Prompt::Text(line.to_string())
        });
    }
    Ok(out)
}

pub fn read_corpus(path: &Path, ids: bool) -> Result<Vec<Prompt>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, ids)
}

/// Names that are single tokens (with a leading space) in the GPT-2
/// vocabulary.
pub const IOI_NAMES: &[&str] = &[
    "Mary", "John", "Tom", "James", "Dan", "Sarah", "Anna", "Paul", "Mark", "Lisa", "Michael",
    "David", "Kate", "Alice", "Robert", "Emma", "Peter", "Laura", "Jack", "Rose",
];

const IOI_PLACES: &[&str] = &[
    "store", "park", "school", "office", "station", "garden", "house", "hospital",
];

const IOI_OBJECTS: &[&str] = &[
    "drink",
    "ring",
    "book",
    "bone",
    "kiss",
    "snack",
    "basketball",
    "necklace",
];

/// The canonical indirect-object prompt.
pub const IOI_PROMPT: &str = "When Mary and John went to the store, John gave a drink to";

fn template(a: &str, b: &str, subject: &str, place: &str, object: &str) -> String {
    format!("When {a} and {b} went to the {place}, {subject} gave a {object} to")
}

fn distinct<'a>(rng: &mut ChaCha8Rng, k: usize) -> Vec<&'a str> {
    IOI_NAMES.choose_multiple(rng, k).copied().collect()
}

/// Indirect-object prompts: the second name is repeated as the subject, so
/// the expected completion is the first name.
pub fn ioi_prompts(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let names = distinct(&mut rng, 2);
            let place = IOI_PLACES.choose(&mut rng).expect("non-empty");
            let object = IOI_OBJECTS.choose(&mut rng).expect("non-empty");
            template(names[0], names[1], names[1], place, object)
        })
        .collect()
}

/// Contrastive prompts with three distinct names and no repeated subject.
pub fn abc_prompts(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let names = distinct(&mut rng, 3);
            let place = IOI_PLACES.choose(&mut rng).expect("non-empty");
            let object = IOI_OBJECTS.choose(&mut rng).expect("non-empty");
            template(names[0], names[1], names[2], place, object)
        })
        .collect()
}
