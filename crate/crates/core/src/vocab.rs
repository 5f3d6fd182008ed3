//! Word-level vocabulary with reserved special tokens.
//!
//! Ids `0..5` are always `<PAD>`, `<UNK>`, `<EOS>`, the slot separator and the
//! object separator, in that order. Remaining ids follow first-occurrence order
//! over the corpus and then the extra list.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use thiserror::Error;

use crate::format::{DEFAULT_OBJ_SEP, DEFAULT_SLOT_SEP};

pub type TokenId = u32;

pub const PAD_LITERAL: &str = "<PAD>";
pub const UNK_LITERAL: &str = "<UNK>";
pub const EOS_LITERAL: &str = "<EOS>";

pub const SPECIAL_COUNT: usize = 5;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("token id {id} out of range for vocabulary of size {size}")]
    OutOfRange { id: TokenId, size: usize },
    #[error("vocabulary file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub eos: TokenId,
    pub slot_sep: TokenId,
    pub obj_sep: TokenId,
}

impl SpecialIds {
    /// Every vocabulary uses these ids.
    pub const FIXED: SpecialIds = SpecialIds {
        pad: 0,
        unk: 1,
        eos: 2,
        slot_sep: 3,
        obj_sep: 4,
    };

    pub fn contains(&self, id: TokenId) -> bool {
        id == self.pad || id == self.unk || id == self.eos || id == self.slot_sep || id == self.obj_sep
    }

    pub fn is_separator(&self, id: TokenId) -> bool {
        id == self.slot_sep || id == self.obj_sep
    }
}

/// An ordered sequence of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn into_vec(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: SpecialIds,
}

impl Vocabulary {
    /// Builds a vocabulary with the default `<;>` / `</>` separators.
    pub fn build<A: AsRef<str>, B: AsRef<str>>(corpus: &[A], extra: &[B]) -> Self {
        Self::build_with_separators(corpus, extra, DEFAULT_SLOT_SEP, DEFAULT_OBJ_SEP)
    }

    pub fn build_with_separators<A: AsRef<str>, B: AsRef<str>>(
        corpus: &[A],
        extra: &[B],
        slot_sep: &str,
        obj_sep: &str,
    ) -> Self {
        let mut vocab = Self::specials_only(slot_sep, obj_sep);
        let words = corpus
            .iter()
            .map(AsRef::as_ref)
            .chain(extra.iter().map(AsRef::as_ref))
            .flat_map(str::split_whitespace);
        for word in words {
            vocab.insert(word);
        }
        vocab
    }

    fn specials_only(slot_sep: &str, obj_sep: &str) -> Self {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            specials: SpecialIds::FIXED,
        };
        for literal in [PAD_LITERAL, UNK_LITERAL, EOS_LITERAL, slot_sep, obj_sep] {
            vocab.insert(literal);
        }
        debug_assert_eq!(vocab.len(), SPECIAL_COUNT);
        vocab
    }

    fn insert(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn slot_sep_literal(&self) -> &str {
        &self.tokens[self.specials.slot_sep as usize]
    }

    pub fn obj_sep_literal(&self) -> &str {
        &self.tokens[self.specials.obj_sep as usize]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of every non-special token.
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len() as TokenId).filter(|&id| !self.specials.contains(id))
    }

    /// Whitespace split; unknown words map to `<UNK>`.
    pub fn encode(&self, text: &str) -> TokenSeq {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(self.specials.unk))
            .collect()
    }

    pub fn decode(&self, seq: &[TokenId]) -> Result<String, VocabError> {
        let words = seq
            .iter()
            .map(|&id| {
                self.token(id).ok_or(VocabError::OutOfRange {
                    id,
                    size: self.len(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }

    /// Writes one token per line; the line number is the id.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for token in &self.tokens {
            writeln!(out, "{token}")?;
        }
        out.flush()
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, VocabError> {
        let mut lines = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let token = line.trim_end_matches('\r');
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    message: format!("invalid token {token:?}"),
                });
            }
            lines.push(token.to_string());
        }
        if lines.len() < SPECIAL_COUNT {
            return Err(VocabError::Malformed {
                line: lines.len() + 1,
                message: "missing reserved special tokens".into(),
            });
        }
        for (i, expected) in [PAD_LITERAL, UNK_LITERAL, EOS_LITERAL].iter().enumerate() {
            if lines[i] != *expected {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    message: format!("expected {expected}, found {:?}", lines[i]),
                });
            }
        }
        let mut vocab = Self::specials_only(&lines[3], &lines[4]);
        if vocab.len() != SPECIAL_COUNT {
            return Err(VocabError::Malformed {
                line: 5,
                message: "separator literals collide with other specials".into(),
            });
        }
        for (i, token) in lines.iter().enumerate().skip(SPECIAL_COUNT) {
            if vocab.id(token).is_some() {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    message: format!("duplicate token {token:?}"),
                });
            }
            vocab.insert(token);
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        self.write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
