//! Document model, JSONL corpus format, splitting and vocabulary.

mod generate;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use generate::{
    default_diseases, generate_corpus, generate_documents, render_template, AsymptomaticTemplate,
    DiseaseSpec, GenConfig, NeutralTemplate, SymptomTemplate, EYE_PLACEHOLDER,
};
pub use vocab::{Vocabulary, EMPTY_TOKEN, PAD_TOKEN, UNK_TOKEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Section {
    #[serde(rename = "CC")]
    ChiefComplaint,
    #[serde(rename = "HPI")]
    PresentIllness,
    #[serde(rename = "ER")]
    Examination,
}

impl Section {
    pub const ALL: [Section; 3] = [
        Section::ChiefComplaint,
        Section::PresentIllness,
        Section::Examination,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Section::ChiefComplaint => "CC",
            Section::PresentIllness => "HPI",
            Section::Examination => "ER",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Laterality {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
    #[serde(rename = "B")]
    Both,
    #[serde(rename = "U")]
    Unspecified,
}

impl Laterality {
    /// Marker-keyword rule for untagged text: "left eye", "right eye",
    /// "both eyes"; anything else (or more than one marker) is unspecified.
    pub fn detect(tokens: &[String]) -> Laterality {
        let mut found = None;
        for pair in tokens.windows(2) {
            let hit = match (
                pair[0].to_lowercase().as_str(),
                pair[1].to_lowercase().as_str(),
            ) {
                ("left", "eye") => Some(Laterality::Left),
                ("right", "eye") => Some(Laterality::Right),
                ("both", "eyes") => Some(Laterality::Both),
                _ => None,
            };
            if let Some(h) = hit {
                match found {
                    None => found = Some(h),
                    Some(prev) if prev == h => {}
                    Some(_) => return Laterality::Unspecified,
                }
            }
        }
        found.unwrap_or(Laterality::Unspecified)
    }

    pub fn applies_to(self, eye: Eye) -> bool {
        match self {
            Laterality::Both | Laterality::Unspecified => true,
            Laterality::Left => eye == Eye::Left,
            Laterality::Right => eye == Eye::Right,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Eye {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub section: Section,
    pub laterality: Laterality,
    #[serde(rename = "template")]
    pub is_asymptomatic_template: bool,
}

impl Sentence {
    pub fn new(text: &str, section: Section, laterality: Laterality, template: bool) -> Self {
        Self {
            tokens: tokenize(text),
            section,
            laterality,
            is_asymptomatic_template: template,
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Per-eye multi-label vector, serialized as a JSON array of 0/1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct LabelSet(pub Vec<bool>);

impl LabelSet {
    pub fn zeros(n: usize) -> Self {
        LabelSet(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
    }

    pub fn concat(&self, other: &LabelSet) -> LabelSet {
        LabelSet(self.0.iter().chain(&other.0).copied().collect())
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|b| u8::from(*b)))
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!(
                    "label value {other} is not 0 or 1"
                ))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(LabelSet)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OemrDocument {
    pub id: String,
    pub sentences: Vec<Sentence>,
    pub labels_left: LabelSet,
    pub labels_right: LabelSet,
}

impl OemrDocument {
    pub fn n_labels(&self) -> usize {
        self.labels_left.len()
    }

    pub fn labels(&self, eye: Eye) -> &LabelSet {
        match eye {
            Eye::Left => &self.labels_left,
            Eye::Right => &self.labels_right,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.sentences.is_empty() {
            return Err(format!("document {} has no sentences", self.id));
        }
        if let Some(i) = self.sentences.iter().position(|s| s.tokens.is_empty()) {
            return Err(format!("document {} sentence {i} has no tokens", self.id));
        }
        if self.labels_left.is_empty() {
            return Err(format!("document {} has empty label vectors", self.id));
        }
        if self.labels_left.len() != self.labels_right.len() {
            return Err(format!(
                "document {} label vectors differ in length ({} vs {})",
                self.id,
                self.labels_left.len(),
                self.labels_right.len()
            ));
        }
        Ok(())
    }
}

/// Writes one JSON document per line.
pub fn write_corpus(docs: &[OemrDocument], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<OemrDocument>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(parse_document_line(&line, i + 1)?);
    }
    Ok(docs)
}

/// Parses one corpus line; `line_no` is 1-based and only used for errors.
pub fn parse_document_line(line: &str, line_no: usize) -> Result<OemrDocument> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let doc: OemrDocument = serde_json::from_value(value).map_err(|e| Error::Schema {
        line: line_no,
        message: e.to_string(),
    })?;
    doc.validate().map_err(|message| Error::Schema {
        line: line_no,
        message,
    })?;
    Ok(doc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<OemrDocument>,
    pub val: Vec<OemrDocument>,
    pub test: Vec<OemrDocument>,
}

/// Seeded shuffle, then floor-sized validation and test parts; the remainder
/// goes to train.
pub fn split_corpus(corpus: &[OemrDocument], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !r.is_finite() || *r < 0.0) || (tr + va + te - 1.0).abs() > 1e-9
    {
        return Err(Error::config(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = corpus.len() as f64;
    let n_val = (n * va + 1e-9).floor() as usize;
    let n_test = (n * te + 1e-9).floor() as usize;
    let n_train = corpus.len() - n_val - n_test;
    let pick = |idx: &[usize]| idx.iter().map(|i| corpus[*i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}
