use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::corpus::{Eye, LabelSet, OemrDocument, Section, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::preprocess::MonocularDocument;

/// One prediction instance: a per-eye document, or a whole record for the
/// unsplit ablation (labels then hold left followed by right).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub id: String,
    pub eye: Option<Eye>,
    pub sentences: Vec<Sentence>,
    pub labels: LabelSet,
}

impl From<&MonocularDocument> for ModelInput {
    fn from(d: &MonocularDocument) -> Self {
        Self {
            id: d.source_id.clone(),
            eye: Some(d.eye),
            sentences: d.sentences.clone(),
            labels: d.labels.clone(),
        }
    }
}

impl From<MonocularDocument> for ModelInput {
    fn from(d: MonocularDocument) -> Self {
        Self {
            id: d.source_id,
            eye: Some(d.eye),
            sentences: d.sentences,
            labels: d.labels,
        }
    }
}

impl ModelInput {
    pub fn unsplit(doc: &OemrDocument) -> Self {
        Self {
            id: doc.id.clone(),
            eye: None,
            sentences: doc.sentences.clone(),
            labels: doc.labels_left.concat(&doc.labels_right),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub section: Section,
    /// Content token ids without the type-token.
    pub ids: Vec<usize>,
}

impl EncodedSentence {
    /// Encoder sequence length: content plus the leading type-token.
    pub fn sequence_len(&self) -> usize {
        self.ids.len() + 1
    }
}

/// Token ids of a document after truncation to the model's limits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDocument {
    pub sentences: Vec<EncodedSentence>,
}

impl EncodedDocument {
    pub fn new(sentences: &[Sentence], vocab: &Vocabulary, config: &ModelConfig) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyInput("document has no sentences".into()));
        }
        let sentences = sentences
            .iter()
            .take(config.max_sentences)
            .map(|s| {
                let mut ids = vocab.encode(&s.tokens);
                ids.truncate(config.max_tokens_per_sentence);
                EncodedSentence {
                    section: s.section,
                    ids,
                }
            })
            .collect();
        Ok(Self { sentences })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// All tokens as one sequence with a type-token wherever the section
    /// changes, cut at `limit`.
    pub fn flat_ids(&self, limit: usize) -> Vec<usize> {
        let mut ids = Vec::new();
        let mut current = None;
        for s in &self.sentences {
            if current != Some(s.section) {
                ids.push(Vocabulary::type_token(s.section));
                current = Some(s.section);
            }
            ids.extend_from_slice(&s.ids);
        }
        ids.truncate(limit);
        ids
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            sentences: order.iter().map(|i| self.sentences[*i].clone()).collect(),
        }
    }
}
