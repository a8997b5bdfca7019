//! Frequency-based removal of templated asymptomatic descriptions, then
//! splitting each record into one document per eye.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Eye, LabelSet, Laterality, OemrDocument, Section, Sentence, EMPTY_TOKEN};
use crate::error::{Error, Result};

/// Stands in for "left eye", "right eye" and "both eyes" in normalized text.
pub const EYE_MARKER: &str = "<eye>";

/// Best of 0.05, 0.1, 0.2 and 0.3; lower values start dropping useful
/// descriptions.
pub const DEFAULT_THRESHOLD_B: f64 = 0.1;

/// Lowercased, whitespace-collapsed text with laterality markers replaced,
/// so mirrored templates share one entry.
pub fn normalize_tokens(tokens: &[String]) -> String {
    let lower: Vec<String> = tokens
        .iter()
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    let mut out: Vec<&str> = Vec::with_capacity(lower.len());
    let mut i = 0;
    while i < lower.len() {
        if i + 1 < lower.len() {
            let pair = (lower[i].as_str(), lower[i + 1].as_str());
            if matches!(pair, ("left", "eye") | ("right", "eye") | ("both", "eyes")) {
                out.push(EYE_MARKER);
                i += 2;
                continue;
            }
        }
        out.push(&lower[i]);
        i += 1;
    }
    out.join(" ")
}

pub fn normalize_text(text: &str) -> String {
    normalize_tokens(&crate::corpus::tokenize(text))
}

/// Document frequency of every normalized sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqTable {
    counts: BTreeMap<String, usize>,
    n_docs: usize,
}

impl FreqTable {
    /// Counts each normalized sentence at most once per document. Build this
    /// over the training split only.
    pub fn build(corpus: &[OemrDocument]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput(
                "sentence frequencies need at least one document".into(),
            ));
        }
        let mut counts = BTreeMap::new();
        for doc in corpus {
            let distinct: HashSet<String> = doc
                .sentences
                .iter()
                .map(|s| normalize_tokens(&s.tokens))
                .collect();
            for s in distinct {
                *counts.entry(s).or_insert(0) += 1;
            }
        }
        Ok(Self {
            counts,
            n_docs: corpus.len(),
        })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Fraction of documents containing the normalized sentence; zero when unseen.
    pub fn frequency(&self, normalized: &str) -> f64 {
        self.counts
            .get(normalized)
            .map_or(0.0, |k| *k as f64 / self.n_docs as f64)
    }

    pub fn sentence_frequency(&self, sentence: &Sentence) -> f64 {
        self.frequency(&normalize_tokens(&sentence.tokens))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.counts
            .iter()
            .map(|(s, k)| (s.as_str(), *k as f64 / self.n_docs as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub threshold_b: f64,
    /// Normalized sentences treated as templated asymptomatic descriptions in
    /// addition to sentences carrying the template flag.
    pub lexicon: Option<BTreeSet<String>>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            threshold_b: DEFAULT_THRESHOLD_B,
            lexicon: None,
        }
    }
}

impl PreprocessConfig {
    pub fn with_threshold(threshold_b: f64) -> Self {
        Self {
            threshold_b,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold_b) {
            return Err(Error::config(format!(
                "threshold B {} outside [0, 1]",
                self.threshold_b
            )));
        }
        Ok(())
    }

    fn is_asymptomatic(&self, sentence: &Sentence) -> bool {
        sentence.is_asymptomatic_template
            || self
                .lexicon
                .as_ref()
                .is_some_and(|lex| lex.contains(&normalize_tokens(&sentence.tokens)))
    }
}

/// Reads a template lexicon: one sentence per line, normalized on load.
pub fn load_lexicon(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(normalize_text)
        .filter(|l| !l.is_empty())
        .collect())
}

pub fn empty_sentence() -> Sentence {
    Sentence {
        tokens: vec![EMPTY_TOKEN.to_string()],
        section: Section::ChiefComplaint,
        laterality: Laterality::Unspecified,
        is_asymptomatic_template: false,
    }
}

/// Drops asymptomatic template sentences whose frequency exceeds B, keeping
/// the order of everything else.
pub fn filter_asymptomatic(
    doc: &OemrDocument,
    table: &FreqTable,
    cfg: &PreprocessConfig,
) -> OemrDocument {
    let mut sentences: Vec<Sentence> = doc
        .sentences
        .iter()
        .filter(|s| !(cfg.is_asymptomatic(s) && table.sentence_frequency(s) > cfg.threshold_b))
        .cloned()
        .collect();
    if sentences.is_empty() {
        sentences.push(empty_sentence());
    }
    OemrDocument {
        sentences,
        ..doc.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonocularDocument {
    #[serde(rename = "id")]
    pub source_id: String,
    pub eye: Eye,
    pub sentences: Vec<Sentence>,
    pub labels: LabelSet,
}

/// Distributes sentences to the eyes they describe; both-eye and unspecified
/// sentences go to both documents.
pub fn split_by_eye(doc: &OemrDocument) -> (MonocularDocument, MonocularDocument) {
    let side = |eye: Eye| {
        let mut sentences: Vec<Sentence> = doc
            .sentences
            .iter()
            .filter(|s| s.laterality.applies_to(eye))
            .cloned()
            .collect();
        if sentences.is_empty() {
            sentences.push(empty_sentence());
        }
        MonocularDocument {
            source_id: doc.id.clone(),
            eye,
            sentences,
            labels: doc.labels(eye).clone(),
        }
    };
    (side(Eye::Left), side(Eye::Right))
}

/// Filter then split every record; output is `[d0 left, d0 right, d1 left, ...]`.
pub fn preprocess_corpus(
    corpus: &[OemrDocument],
    table: &FreqTable,
    cfg: &PreprocessConfig,
) -> Result<Vec<MonocularDocument>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(corpus.len() * 2);
    for doc in corpus {
        let (l, r) = split_by_eye(&filter_asymptomatic(doc, table, cfg));
        out.push(l);
        out.push(r);
    }
    Ok(out)
}

pub fn write_monocular(docs: &[MonocularDocument], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use proptest::prelude::*;

    fn sent(text: &str, lat: Laterality, template: bool) -> Sentence {
        Sentence::new(text, Section::Examination, lat, template)
    }

    fn doc(id: &str, sentences: Vec<Sentence>) -> OemrDocument {
        OemrDocument {
            id: id.into(),
            sentences,
            labels_left: LabelSet(vec![true]),
            labels_right: LabelSet(vec![false]),
        }
    }

    #[test]
    fn counts_document_frequency() {
        let mut corpus: Vec<_> = (0..10)
            .map(|i| {
                doc(
                    &format!("{i}"),
                    vec![sent("filler", Laterality::Unspecified, false)],
                )
            })
            .collect();
        corpus[0]
            .sentences
            .push(sent("cornea clear", Laterality::Left, true));
        corpus[1]
            .sentences
            .push(sent("cornea clear", Laterality::Left, true));
        corpus[1]
            .sentences
            .push(sent("cornea clear", Laterality::Left, true));
        let t = FreqTable::build(&corpus).unwrap();
        assert_eq!(t.frequency("cornea clear"), 0.2);
        assert_eq!(t.frequency("filler"), 1.0);
    }

    #[test]
    fn mirrored_templates_pool() {
        let corpus = vec![
            doc("a", vec![sent("no edema left eye", Laterality::Left, true)]),
            doc(
                "b",
                vec![sent("No  edema right eye", Laterality::Right, true)],
            ),
            doc("c", vec![sent("other", Laterality::Right, false)]),
            doc("d", vec![sent("other", Laterality::Right, false)]),
        ];
        let t = FreqTable::build(&corpus).unwrap();
        assert_eq!(t.frequency("no edema <eye>"), 0.5);
        assert_eq!(t.iter().count(), 2);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(FreqTable::build(&[]), Err(Error::EmptyInput(_))));
    }

    fn table_with(freq_sentence: &str, k: usize, n: usize) -> FreqTable {
        let corpus: Vec<_> = (0..n)
            .map(|i| {
                let text = if i < k { freq_sentence } else { "unrelated" };
                doc(&i.to_string(), vec![sent(text, Laterality::Left, true)])
            })
            .collect();
        FreqTable::build(&corpus).unwrap()
    }

    #[test]
    fn filter_rule() {
        let cfg = PreprocessConfig::with_threshold(0.1);
        let frequent = table_with("cornea clear", 20, 100);
        let d = doc(
            "x",
            vec![
                sent("cornea clear", Laterality::Left, true),
                sent("lens opacity", Laterality::Left, false),
            ],
        );
        assert_eq!(filter_asymptomatic(&d, &frequent, &cfg).sentences.len(), 1);
        let rare = table_with("cornea clear", 5, 100);
        assert_eq!(filter_asymptomatic(&d, &rare, &cfg).sentences.len(), 2);
        let symptomatic = table_with("lens opacity", 90, 100);
        let d = doc("y", vec![sent("lens opacity", Laterality::Left, false)]);
        assert_eq!(
            filter_asymptomatic(&d, &symptomatic, &cfg).sentences,
            d.sentences
        );
    }

    #[test]
    fn lexicon_marks_unflagged_sentences() {
        let table = table_with("cornea clear", 50, 100);
        let lex: BTreeSet<String> = [normalize_text("Cornea clear")].into_iter().collect();
        let cfg = PreprocessConfig {
            threshold_b: 0.1,
            lexicon: Some(lex),
        };
        let d = doc(
            "x",
            vec![
                sent("cornea clear", Laterality::Left, false),
                sent("lens opacity", Laterality::Left, false),
            ],
        );
        assert_eq!(filter_asymptomatic(&d, &table, &cfg).sentences.len(), 1);
    }

    #[test]
    fn filtering_everything_inserts_empty_sentinel() {
        let table = table_with("cornea clear", 100, 100);
        let d = doc("x", vec![sent("cornea clear", Laterality::Left, true)]);
        let out = filter_asymptomatic(&d, &table, &PreprocessConfig::default());
        assert_eq!(out.sentences, vec![empty_sentence()]);
    }

    #[test]
    fn eye_split_rules() {
        let d = doc(
            "x",
            vec![
                sent("right only", Laterality::Right, false),
                sent("both", Laterality::Both, false),
                sent("unknown", Laterality::Unspecified, false),
                sent("left only", Laterality::Left, false),
            ],
        );
        let (l, r) = split_by_eye(&d);
        let texts =
            |m: &MonocularDocument| m.sentences.iter().map(Sentence::text).collect::<Vec<_>>();
        assert_eq!(texts(&l), ["both", "unknown", "left only"]);
        assert_eq!(texts(&r), ["right only", "both", "unknown"]);
        assert_eq!(l.labels, d.labels_left);
        assert_eq!(r.labels, d.labels_right);
        assert_eq!((l.eye, r.eye), (Eye::Left, Eye::Right));
    }

    #[test]
    fn one_sided_document_gets_sentinel_on_other_eye() {
        let d = doc("x", vec![sent("left only", Laterality::Left, false)]);
        let (_, r) = split_by_eye(&d);
        assert_eq!(r.sentences, vec![empty_sentence()]);
    }

    #[test]
    fn preprocess_counts_and_composition() {
        let corpus = crate::corpus::generate_documents(&crate::corpus::GenConfig {
            n_docs: 100,
            ..Default::default()
        })
        .unwrap();
        let table = FreqTable::build(&corpus).unwrap();
        let cfg = PreprocessConfig::default();
        let out = preprocess_corpus(&corpus, &table, &cfg).unwrap();
        assert_eq!(out.len(), 200);
        for (i, d) in corpus.iter().enumerate() {
            let (l, r) = split_by_eye(&filter_asymptomatic(d, &table, &cfg));
            assert_eq!(out[2 * i], l);
            assert_eq!(out[2 * i + 1], r);
        }
        // B = 0 removes every template sentence that occurs at all.
        let zero =
            preprocess_corpus(&corpus, &table, &PreprocessConfig::with_threshold(0.0)).unwrap();
        assert!(zero
            .iter()
            .flat_map(|d| &d.sentences)
            .all(|s| !s.is_asymptomatic_template));
        assert_eq!(preprocess_corpus(&corpus, &table, &cfg).unwrap(), out);
    }

    #[test]
    fn invalid_threshold() {
        let corpus = vec![doc("a", vec![sent("x", Laterality::Left, false)])];
        let table = FreqTable::build(&corpus).unwrap();
        assert!(matches!(
            preprocess_corpus(&corpus, &table, &PreprocessConfig::with_threshold(1.5)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lexicon_file_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.txt");
        fs::write(&p, "Cornea  clear\nno edema left eye\n\n").unwrap();
        let lex = load_lexicon(&p).unwrap();
        assert!(lex.contains("cornea clear"));
        assert!(lex.contains("no edema <eye>"));
        assert_eq!(lex.len(), 2);
    }

    #[test]
    fn monocular_wire_format() {
        let (l, _) = split_by_eye(&doc("x", vec![sent("a b", Laterality::Left, false)]));
        let v = serde_json::to_value(&l).unwrap();
        assert_eq!(v["id"], "x");
        assert_eq!(v["eye"], "L");
        assert_eq!(v["labels"], serde_json::json!([1]));
    }

    fn arb_doc() -> impl Strategy<Value = OemrDocument> {
        let lat = prop_oneof![
            Just(Laterality::Left),
            Just(Laterality::Right),
            Just(Laterality::Both),
            Just(Laterality::Unspecified)
        ];
        proptest::collection::vec((0usize..6, lat, any::<bool>()), 1..8).prop_map(|ss| {
            doc(
                "p",
                ss.into_iter()
                    .map(|(t, l, tpl)| sent(&format!("s{t} left eye"), l, tpl))
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn split_loses_nothing(d in arb_doc()) {
            let (l, r) = split_by_eye(&d);
            for s in &d.sentences {
                let in_l = l.sentences.contains(s);
                let in_r = r.sentences.contains(s);
                prop_assert!(in_l || in_r);
            }
            for s in l.sentences.iter().chain(&r.sentences) {
                prop_assert!(s.tokens == vec![EMPTY_TOKEN.to_string()] || d.sentences.contains(s));
            }
            prop_assert!(l.sentences.iter().all(|s| s.laterality.applies_to(Eye::Left)));
            prop_assert!(r.sentences.iter().all(|s| s.laterality.applies_to(Eye::Right)));
        }

        #[test]
        fn filter_monotone_in_threshold(docs in proptest::collection::vec(arb_doc(), 1..12), b1 in 0.0f64..1.0, b2 in 0.0f64..1.0) {
            let (lo, hi) = (b1.min(b2), b1.max(b2));
            let table = FreqTable::build(&docs).unwrap();
            for d in &docs {
                let a = filter_asymptomatic(d, &table, &PreprocessConfig::with_threshold(lo));
                let b = filter_asymptomatic(d, &table, &PreprocessConfig::with_threshold(hi));
                for s in a.sentences.iter().filter(|s| s.tokens != tokenize(EMPTY_TOKEN)) {
                    prop_assert!(b.sentences.contains(s));
                }
            }
        }
    }
}
