//! Sentence-sequence construction for documents that arrive pre-segmented
//! (tab-separated sentences, one document per line; labeled files prefix
//! each line with `<label>\t`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Patch, SequenceSample};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Token vocabulary built from the training split only: the most frequent
/// tokens up to `max_size`, with ids 0 and 1 reserved for pad and unknown.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    map: HashMap<String, u32>,
    size: usize,
}

fn tokenize(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence.split_whitespace().map(|t| t.to_lowercase())
}

impl Vocabulary {
    pub fn build(documents: &[Vec<String>], max_size: usize) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for doc in documents {
            for sentence in doc {
                for tok in tokenize(sentence) {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        // Deterministic ordering: by count descending, then token ascending.
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size.saturating_sub(2);
        let map = entries
            .into_iter()
            .take(keep)
            .enumerate()
            .map(|(i, (tok, _))| (tok, i as u32 + 2))
            .collect::<HashMap<_, _>>();
        let size = map.len() + 2;
        Self { map, size }
    }

    /// Total id count including pad and unknown.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn id(&self, token: &str) -> u32 {
        self.map.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Encodes a sentence to exactly `len` ids, truncating or padding.
    pub fn encode_sentence(&self, sentence: &str, len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(sentence).map(|t| self.id(&t)).take(len).collect();
        ids.resize(len, PAD_ID);
        ids
    }
}

/// Builds one sentence-sequence sample. Documents shorter than `min_len`
/// sentences are padded by repeating the final sentence.
pub fn build_text_sequences(
    sentences: &[String],
    label: Option<usize>,
    vocab: &Vocabulary,
    min_len: usize,
    sentence_len: usize,
    id: u64,
    group: u64,
) -> Result<SequenceSample> {
    if sentences.is_empty() {
        return Err(Error::EmptyDocument);
    }
    let mut patches: Vec<Patch> = sentences
        .iter()
        .map(|s| Patch::Tokens(vocab.encode_sentence(s, sentence_len)))
        .collect();
    while patches.len() < min_len {
        patches.push(patches.last().expect("non-empty").clone());
    }
    Ok(SequenceSample {
        id,
        group,
        label,
        patches,
    })
}

/// Parses one document per line. With `labeled`, each line starts with
/// `<label>\t`; the remaining tab-separated fields are sentences.
pub fn parse_documents(content: &str, labeled: bool) -> Result<Vec<(Option<usize>, Vec<String>)>> {
    let mut docs = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let label = if labeled {
            let raw = fields.next().unwrap_or("");
            let parsed = raw.trim().parse::<usize>().map_err(|_| Error::InvalidConfig {
                what: "text label",
                detail: format!("line {}: '{raw}' is not a class index", lineno + 1),
            })?;
            Some(parsed)
        } else {
            None
        };
        let sentences: Vec<String> = fields
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if sentences.is_empty() {
            return Err(Error::EmptyDocument);
        }
        docs.push((label, sentences));
    }
    Ok(docs)
}

pub fn read_documents(path: &Path, labeled: bool) -> Result<Vec<(Option<usize>, Vec<String>)>> {
    parse_documents(&fs::read_to_string(path)?, labeled)
}
