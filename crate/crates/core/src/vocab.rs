//! Report tokenization and the two id spaces used by the model: report words
//! and serialized attribute strings (global ids plus per-category slot lists).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_graph::SceneGraph;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits into alphanumeric runs plus single-character
/// punctuation tokens. Whitespace only separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                cur.push(lc);
            }
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Report vocabulary with fixed special ids and lexicographic assignment for
/// the rest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenVocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl TokenVocab {
    /// Builds from a corpus, keeping words that occur at least `min_freq`
    /// times. Ids 0..=3 are PAD/BOS/EOS/UNK; the rest follow in
    /// lexicographic order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut n_docs = 0usize;
        for doc in corpus {
            n_docs += 1;
            for tok in tokenize(doc) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if n_docs == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(
            freq.into_iter()
                .filter(|(_, c)| *c >= min_freq)
                .map(|(w, _)| w),
        );
        Ok(Self::from_words(words))
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    /// Token ids without any specials.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// BOS + token ids + EOS.
    pub fn encode_report(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Joins non-special tokens with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.word(id))
            .collect();
        toks.join(" ")
    }
}

/// Attribute id space: a global table over serialized attribute strings and,
/// per anatomical category, the ordered slot list that sizes that category's
/// classification head.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttributeVocab {
    strings: Vec<String>,
    index: BTreeMap<String, u32>,
    per_category: Vec<Vec<u32>>,
}

impl AttributeVocab {
    /// Collects every attribute string in the graphs. Global id 0 is the UNK
    /// fallback; the rest are assigned lexicographically. Slot order within a
    /// category is lexicographic as well.
    pub fn build(graphs: &[SceneGraph], n_categories: usize) -> Self {
        let mut seen: Vec<BTreeMap<String, ()>> = vec![BTreeMap::new(); n_categories];
        let mut global: BTreeMap<String, ()> = BTreeMap::new();
        for g in graphs {
            for a in &g.attributes {
                let cat = g.objects[a.owner].category;
                let s = a.serialized();
                global.insert(s.clone(), ());
                if cat < n_categories {
                    seen[cat].insert(s, ());
                }
            }
        }
        let mut strings = vec!["<unk>".to_string()];
        strings.extend(global.into_keys());
        let index: BTreeMap<String, u32> = strings
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let per_category = seen
            .into_iter()
            .map(|m| m.into_keys().map(|s| index[&s]).collect())
            .collect();
        Self {
            strings,
            index,
            per_category,
        }
    }

    /// Number of distinct global ids, UNK included.
    pub fn total(&self) -> usize {
        self.strings.len()
    }

    pub fn n_categories(&self) -> usize {
        self.per_category.len()
    }

    /// Head width for category `k`.
    pub fn n_attrs(&self, k: usize) -> usize {
        self.per_category[k].len()
    }

    pub fn global_id(&self, serialized: &str) -> u32 {
        self.index.get(serialized).copied().unwrap_or(0)
    }

    pub fn string(&self, id: u32) -> &str {
        &self.strings[id as usize]
    }

    pub fn slot_of(&self, k: usize, serialized: &str) -> Option<usize> {
        let id = self.index.get(serialized)?;
        self.per_category[k].iter().position(|g| g == id)
    }

    pub fn slot_string(&self, k: usize, slot: usize) -> &str {
        self.string(self.per_category[k][slot])
    }
}
