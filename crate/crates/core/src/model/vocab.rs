// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vocabulary file and the whitespace/punctuation tokenizer.
//!
//! The vocabulary file is a JSON array of token strings where the index is
//! the id. Ids 0..4 are reserved for `<pad>`, `<bos>`, `<eos>`, `<unk>`.
//!
//! Tokenisation splits on whitespace, then within each chunk emits:
//! - any vocabulary entry of the form `<...>` matched literally (e.g. `<think>`),
//! - each Hangul character on its own,
//! - each punctuation/symbol character on its own,
//! - maximal runs of other characters (letters, digits) as one token.
//!
//! Pieces that are not in the vocabulary map to `<unk>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::TokenSequence;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    tags: Vec<String>,
}

pub(crate) fn is_hangul(c: char) -> bool {
    matches!(c as u32, 0xAC00..=0xD7A3 | 0x1100..=0x11FF | 0x3130..=0x318F)
}

impl Vocab {
    /// Builds a vocabulary from the given regular tokens; the four specials
    /// are prepended.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
            .collect();
        Self::from_list(all)
    }

    /// Builds a vocabulary from a full id-ordered list, which must start with
    /// the four specials.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4] != SPECIALS {
            return Err(Error::arg(format!(
                "vocabulary must start with {SPECIALS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::arg(format!("invalid vocabulary entry {t:?} at {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::arg(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let mut tags: Vec<String> = tokens
            .iter()
            .skip(4)
            .filter(|t| t.len() > 2 && t.starts_with('<') && t.ends_with('>'))
            .cloned()
            .collect();
        tags.sort_by_key(|t| std::cmp::Reverse(t.len()));
        Ok(Vocab {
            tokens,
            index,
            tags,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let list: Vec<String> = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_list(list)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.tokens)?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits text into token strings (before vocabulary lookup).
    pub fn pieces(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let mut rest = chunk;
            let mut word = String::new();
            while let Some(c) = rest.chars().next() {
                if let Some(tag) = self.tags.iter().find(|t| rest.starts_with(t.as_str())) {
                    flush(&mut word, &mut out);
                    out.push(tag.clone());
                    rest = &rest[tag.len()..];
                    continue;
                }
                if is_hangul(c) || !(c.is_alphanumeric() || c == '_') {
                    flush(&mut word, &mut out);
                    out.push(c.to_string());
                } else {
                    word.push(c);
                }
                rest = &rest[c.len_utf8()..];
            }
            flush(&mut word, &mut out);
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.pieces(text)
            .iter()
            .map(|p| self.id(p).unwrap_or(UNK))
            .collect()
    }

    /// `<bos>` followed by the encoded text.
    pub fn encode_with_bos(&self, text: &str) -> TokenSequence {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        TokenSequence::with_text(ids, text)
    }

    /// Joins token strings with single spaces, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}
