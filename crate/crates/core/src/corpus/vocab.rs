use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{OemrDocument, Section};
use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const EMPTY_TOKEN: &str = "[EMPTY]";

const RESERVED: [&str; 3] = [PAD_TOKEN, UNK_TOKEN, EMPTY_TOKEN];

/// Dense token ids: `[PAD]`, `[UNK]`, `[EMPTY]`, then one type-token per
/// section, then content tokens in sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    content: Vec<String>,
    index: BTreeMap<String, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabularyFile {
    content_tokens: Vec<String>,
}

impl From<VocabularyFile> for Vocabulary {
    fn from(f: VocabularyFile) -> Self {
        let mut v = Vocabulary {
            content: f.content_tokens,
            index: BTreeMap::new(),
        };
        v.reindex();
        v
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile {
            content_tokens: v.content,
        }
    }
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const EMPTY: usize = 2;
    const FIRST_CONTENT: usize = RESERVED.len() + Section::ALL.len();

    pub fn from_tokens<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Self {
        let set: BTreeSet<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| !RESERVED.contains(&t.as_str()))
            .collect();
        let mut v = Self {
            content: set.into_iter().collect(),
            index: BTreeMap::new(),
        };
        v.reindex();
        v
    }

    /// Vocabulary over every token of `corpus` (pass the training split).
    pub fn build(corpus: &[OemrDocument]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        Ok(Self::from_tokens(
            corpus
                .iter()
                .flat_map(|d| d.sentences.iter())
                .flat_map(|s| s.tokens.iter().cloned()),
        ))
    }

    fn reindex(&mut self) {
        self.index = self
            .content
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + Self::FIRST_CONTENT))
            .collect();
    }

    pub fn len(&self) -> usize {
        Self::FIRST_CONTENT + self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn type_token(section: Section) -> usize {
        RESERVED.len() + section.index()
    }

    pub fn id(&self, token: &str) -> usize {
        if token == EMPTY_TOKEN {
            return Self::EMPTY;
        }
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < RESERVED.len() {
            return Some(RESERVED[id]);
        }
        if id < Self::FIRST_CONTENT {
            return Some(Section::ALL[id - RESERVED.len()].code());
        }
        self.content
            .get(id - Self::FIRST_CONTENT)
            .map(String::as_str)
    }

    pub fn token_to_id(&self) -> &BTreeMap<String, usize> {
        &self.index
    }
}
