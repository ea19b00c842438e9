// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE tokenizer (GPT-2 vocabulary/merges format) with
//! word-boundary metadata.
//!
//! A token opens a new word when it is the first token, when it starts
//! with whitespace (the encoded-space marker), when it starts with ASCII
//! punctuation, or when the previous token ended in whitespace or ASCII
//! punctuation. Everything else is a later subword of the current word.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// A tokenized sequence with word grouping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// Decoded text of each token (lossy for partial UTF-8 sequences).
    pub strings: Vec<String>,
    pub word_ids: Vec<usize>,
    pub is_first_subword: Vec<bool>,
    /// Whether position 0 is a prepended beginning-of-sequence token.
    pub has_bos: bool,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_words(&self) -> usize {
        self.word_ids.last().map_or(0, |w| w + 1)
    }

    /// Builds a sequence from ids and token strings with explicit word ids.
    pub fn with_words(
        ids: Vec<u32>,
        strings: Vec<String>,
        word_ids: Vec<usize>,
        has_bos: bool,
    ) -> Result<Self> {
        if strings.len() != ids.len() || word_ids.len() != ids.len() {
            return Err(Error::Dimension(format!(
                "token sequence lists differ in length: {} ids, {} strings, {} word ids",
                ids.len(),
                strings.len(),
                word_ids.len()
            )));
        }
        let mut is_first = Vec::with_capacity(ids.len());
        for (i, &w) in word_ids.iter().enumerate() {
            match i {
                0 if w != 0 => {
                    return Err(Error::Parse("word ids must start at 0".into()));
                }
                0 => is_first.push(true),
                _ => {
                    let prev = word_ids[i - 1];
                    if w != prev && w != prev + 1 {
                        return Err(Error::Parse(format!(
                            "word ids must be non-decreasing and contiguous, got {prev} then {w}"
                        )));
                    }
                    is_first.push(w != prev);
                }
            }
        }
        Ok(Self {
            ids,
            strings,
            word_ids,
            is_first_subword: is_first,
            has_bos,
        })
    }

    /// Builds a sequence inferring word boundaries from per-token bytes.
    pub(crate) fn infer_words(ids: Vec<u32>, bytes: &[Vec<u8>], has_bos: bool) -> Self {
        let mut word_ids = Vec::with_capacity(ids.len());
        let mut word = 0usize;
        for i in 0..ids.len() {
            if i > 0 {
                let after_bos = has_bos && i == 1;
                if after_bos || starts_word(&bytes[i - 1], &bytes[i]) {
                    word += 1;
                }
            }
            word_ids.push(word);
        }
        let strings = bytes
            .iter()
            .map(|b| String::from_utf8_lossy(b).into_owned())
            .collect();
        let is_first = (0..ids.len())
            .map(|i| i == 0 || word_ids[i] != word_ids[i - 1])
            .collect();
        Self {
            ids,
            strings,
            word_ids,
            is_first_subword: is_first,
            has_bos,
        }
    }
}

fn is_boundary_byte(b: u8) -> bool {
    b.is_ascii() && !b.is_ascii_alphanumeric()
}

fn starts_word(prev: &[u8], cur: &[u8]) -> bool {
    let first = cur.first().copied();
    let last = prev.last().copied();
    first.is_none_or(is_boundary_byte) || last.is_none_or(is_boundary_byte)
}

/// GPT-2 byte to printable-unicode table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut printable: Vec<u32> = (u32::from(b'!')..=u32::from(b'~')).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut extra = 0u32;
    for b in 0..256u32 {
        let c = if printable.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

/// Byte-level BPE tokenizer.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    /// Raw bytes of every id.
    id_bytes: Vec<Vec<u8>>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    bos_id: Option<u32>,
    prepend_bos: bool,
}

impl Tokenizer {
    /// Loads `vocab.json` and `merges.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let merges_path = dir.join("merges.txt");
        let vocab = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let merges = fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        Self::from_strings(&vocab, &merges)
    }

    /// Builds a tokenizer from the contents of a vocab JSON map and a
    /// merges file.
    pub fn from_strings(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let encoder: HashMap<String, u32> = serde_json::from_str(vocab_json)?;
        let byte_encoder = bytes_to_unicode();
        let mut byte_decoder = HashMap::with_capacity(256);
        for (b, c) in byte_encoder.iter().enumerate() {
            byte_decoder.insert(*c, b as u8);
        }
        let size = encoder.values().map(|&v| v as usize + 1).max().unwrap_or(0);
        let mut id_bytes = vec![Vec::new(); size];
        for (tok, &id) in &encoder {
            let bytes = tok
                .chars()
                .map(|c| byte_decoder.get(&c).copied())
                .collect::<Option<Vec<u8>>>()
                // special tokens such as <|endoftext|> are plain ASCII
                .unwrap_or_else(|| tok.as_bytes().to_vec());
            id_bytes[id as usize] = bytes;
        }
        let mut ranks = HashMap::new();
        for line in merges_txt.lines() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => {
                    let rank = ranks.len();
                    ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
                }
                _ => return Err(Error::Parse(format!("bad merges line: {line:?}"))),
            }
        }
        let pattern = Regex::new(GPT2_PATTERN).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(Self {
            encoder,
            id_bytes,
            ranks,
            byte_encoder,
            pattern,
            bos_id: None,
            prepend_bos: false,
        })
    }

    /// Configures the beginning-of-sequence token.
    pub fn with_bos(mut self, bos_id: Option<u32>, prepend: bool) -> Self {
        self.bos_id = bos_id;
        self.prepend_bos = prepend && bos_id.is_some();
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.id_bytes.len()
    }

    pub fn bos_id(&self) -> Option<u32> {
        self.bos_id
    }

    pub fn prepends_bos(&self) -> bool {
        self.prepend_bos
    }

    /// Id of an exact vocabulary entry (in its byte-encoded form).
    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied()
    }

    /// Raw bytes of a token id.
    pub fn id_to_bytes(&self, id: u32) -> Option<&[u8]> {
        self.id_bytes.get(id as usize).map(Vec::as_slice)
    }

    /// Display string of a token id.
    pub fn id_to_string(&self, id: u32) -> Option<String> {
        self.id_to_bytes(id)
            .map(|b| String::from_utf8_lossy(b).into_owned())
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, at)) = best else { break };
            let (a, b) = (parts[at].clone(), parts[at + 1].clone());
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == a && parts[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }

    /// Encodes text, prepending BOS when configured.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::new();
        if self.prepend_bos {
            ids.push(self.bos_id.expect("prepend_bos implies bos id"));
        }
        for m in self.pattern.find_iter(text) {
            let piece = m.map_err(|e| Error::Encoding(e.to_string()))?.as_str();
            let mapped: String = piece
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            for tok in self.bpe(&mapped) {
                let id =
                    self.encoder.get(&tok).copied().ok_or_else(|| {
                        Error::Encoding(format!("no vocabulary entry for {tok:?}"))
                    })?;
                ids.push(id);
            }
        }
        let bytes: Vec<Vec<u8>> = ids
            .iter()
            .map(|&id| self.id_bytes[id as usize].clone())
            .collect();
        Ok(TokenSeq::infer_words(ids, &bytes, self.prepend_bos))
    }

    /// Builds a sequence from ids. Word boundaries are inferred exactly as
    /// in [`Tokenizer::encode`] unless `word_ids` is given.
    pub fn from_ids(&self, ids: &[u32], word_ids: Option<Vec<usize>>) -> Result<TokenSeq> {
        let size = self.vocab_size();
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match self.id_bytes.get(id as usize) {
                Some(b) => bytes.push(b.clone()),
                None => {
                    return Err(Error::Vocabulary {
                        id,
                        vocab_size: size,
                    })
                }
            }
        }
        let has_bos = self.bos_id.is_some() && ids.first() == self.bos_id.as_ref();
        let inferred = TokenSeq::infer_words(ids.to_vec(), &bytes, has_bos);
        match word_ids {
            None => Ok(inferred),
            Some(w) => TokenSeq::with_words(ids.to_vec(), inferred.strings, w, has_bos),
        }
    }

    /// Concatenated bytes of `ids`, decoded as UTF-8 (lossy).
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter_map(|&id| self.id_bytes.get(id as usize))
            .flatten()
            .copied()
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Decodes a sequence, skipping a prepended BOS token.
    pub fn decode_seq(&self, seq: &TokenSeq) -> String {
        let start = usize::from(seq.has_bos);
        self.decode(&seq.ids[start..])
    }
}

/// Parses a `token_index<TAB>pos_tag` annotation sidecar into one
/// optional tag per position. Blank lines are skipped.
pub fn parse_annotations(text: &str, seq_len: usize) -> Result<Vec<Option<String>>> {
    let mut tags = vec![None; seq_len];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (idx, tag) = line.split_once('\t').ok_or_else(|| {
            Error::Parse(format!("annotation line {}: expected index<TAB>tag", i + 1))
        })?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("annotation line {}: bad index {idx:?}", i + 1)))?;
        let slot = tags.get_mut(idx).ok_or_else(|| {
            Error::OutOfRange(format!("annotation index {idx} for {seq_len} tokens"))
        })?;
        if slot.is_some() {
            return Err(Error::Parse(format!("annotation index {idx} given twice")));
        }
        *slot = Some(tag.trim().to_string());
    }
    Ok(tags)
}

/// Sequence for a model without tokenizer files: every id is its own word.
pub fn raw_ids(ids: &[u32], vocab_size: usize) -> Result<TokenSeq> {
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
        return Err(Error::Vocabulary { id, vocab_size });
    }
    let strings = ids.iter().map(|id| format!("<{id}>")).collect();
    TokenSeq::with_words(ids.to_vec(), strings, (0..ids.len()).collect(), false)
}

/// A small byte-level vocabulary for synthetic models: the 256 byte
/// tokens, a fixed list of English merges and `<|endoftext|>` last.
pub fn toy_vocabulary() -> (String, String) {
    const MERGES: &[(&str, &str)] = &[
        ("Ġ", "t"),
        ("h", "e"),
        ("Ġ", "a"),
        ("i", "n"),
        ("Ġt", "he"),
        ("e", "r"),
        ("o", "n"),
        ("Ġ", "s"),
        ("r", "e"),
        ("Ġ", "w"),
        ("a", "n"),
        ("Ġ", "o"),
        ("Ġ", "M"),
        ("Ġ", "J"),
        ("a", "r"),
        ("o", "h"),
        ("Ġ", "d"),
        ("Ġ", "g"),
        ("Ġ", "b"),
        ("i", "s"),
        ("Ġ", "c"),
        ("e", "n"),
        ("n", "d"),
        ("Ġa", "nd"),
        ("Ġw", "e"),
        ("Ġs", "t"),
        ("Ġt", "o"),
        ("Ġ", "f"),
        ("o", "r"),
        ("a", "t"),
    ];
    let table = bytes_to_unicode();
    let mut vocab: Vec<(String, u32)> = Vec::new();
    let mut sorted: Vec<(u8, char)> = (0..=255u8).map(|b| (b, table[b as usize])).collect();
    sorted.sort_by_key(|(_, c)| *c as u32);
    for (_, c) in sorted {
        let id = vocab.len() as u32;
        vocab.push((c.to_string(), id));
    }
    let mut merges = String::from("#version: 0.2\n");
    for (a, b) in MERGES {
        let id = vocab.len() as u32;
        vocab.push((format!("{a}{b}"), id));
        merges.push_str(&format!("{a} {b}\n"));
    }
    let id = vocab.len() as u32;
    vocab.push(("<|endoftext|>".to_string(), id));
    let map: serde_json::Map<String, serde_json::Value> = vocab
        .into_iter()
        .map(|(k, v)| (k, serde_json::Value::from(v)))
        .collect();
    (
        serde_json::to_string(&map).expect("vocab serializes"),
        merges,
    )
}
