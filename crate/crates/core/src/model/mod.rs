//! Hierarchical encoder with label-wise attention.
//!
//! A word-level transformer encodes every sentence (prefixed with its
//! section's type-token) and average-pools it into one row of `A`. A single
//! sentence-level transformer layer without positional encoding turns `A`
//! into `C`. Each disease attends over the rows of `C` with its own label
//! embedding; the resulting vector feeds an independent sigmoid head.
//!
//! Matrices store one sentence (or token) per row, so `C` is `N x d` here.

mod config;
mod forward;
mod input;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{AblationVariant, ModelConfig};
pub use forward::{heads_on_tape, label_attention_on_tape, ForwardVars};
pub use input::{EncodedDocument, EncodedSentence, ModelInput};
pub use params::{ModelParams, ParamIds};

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor};
use crate::corpus::{Sentence, Vocabulary};
use crate::error::{Error, Result};

pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    ModelParams::init(config, seed)
}

/// Attention weights of one forward pass: `alpha[l][n]` is the weight of
/// sentence `sentence_index[n]` for output `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub alpha: Vec<Vec<f64>>,
    pub sentence_index: Vec<usize>,
}

impl AttentionTrace {
    /// Index (into the original sentence list) of the most attended sentence per output.
    pub fn argmax_sentences(&self) -> Vec<usize> {
        self.alpha
            .iter()
            .map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, v)| {
                        if *v > acc.1 {
                            (i, *v)
                        } else {
                            acc
                        }
                    })
                    .0;
                self.sentence_index[best]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    /// Present for variants whose attention ranges over sentences.
    pub trace: Option<AttentionTrace>,
    pub disease_vectors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocumentRepresentation<T> {
    /// Pooled sentence embeddings, `N x d`.
    pub a: Tensor<T>,
    /// Contextualized sentence representations, `N x d`.
    pub c: Tensor<T>,
}

fn rows_f64<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect()
        })
        .collect()
}

/// Sentence embedding `a_i` for a single sentence.
pub fn encode_sentence<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    sentence: &Sentence,
    train: bool,
    rng: &mut R,
) -> Result<Vec<T>> {
    let doc = EncodedDocument::new(std::slice::from_ref(sentence), vocab, &params.config)?;
    let mut tape = Tape::new(&params.store);
    let a = params.encode_sentences_on_tape(&mut tape, &doc, train, rng)?;
    Ok(tape.value(a).data().to_vec())
}

pub fn encode_document<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    sentences: &[Sentence],
    train: bool,
    rng: &mut R,
) -> Result<DocumentRepresentation<T>> {
    let doc = EncodedDocument::new(sentences, vocab, &params.config)?;
    let mut tape = Tape::new(&params.store);
    let a = params.encode_sentences_on_tape(&mut tape, &doc, train, rng)?;
    let c = params.sentence_level_on_tape(&mut tape, a, train, rng)?;
    Ok(DocumentRepresentation {
        a: tape.value(a).clone(),
        c: tape.value(c).clone(),
    })
}

/// Document vector of the flat (non-hierarchical) encoder.
pub fn encode_flat<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    sentences: &[Sentence],
    train: bool,
    rng: &mut R,
) -> Result<Vec<T>> {
    let doc = EncodedDocument::new(sentences, vocab, &params.config)?;
    let mut tape = Tape::new(&params.store);
    let v = params.encode_flat_on_tape(&mut tape, &doc, train, rng)?;
    Ok(tape.value(v).data().to_vec())
}

/// Returns `(V, alpha)` for sentence rows `c` (`N x d`) and label embeddings
/// `labels` (`L x d`).
pub fn label_attention<T: Scalar>(
    c: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if c.cols() != labels.cols() {
        return Err(Error::Shape(format!(
            "C has {} features, label embeddings {}",
            c.cols(),
            labels.cols()
        )));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let cv = tape.constant(c.clone());
    let ev = tape.constant(labels.clone());
    let (v, alpha) = label_attention_on_tape(&mut tape, cv, ev)?;
    Ok((tape.value(v).clone(), tape.value(alpha).clone()))
}

/// `sigmoid(w_l . v_l + b_l)` for every row `l` of `v`.
pub fn predict_probs<T: Scalar>(
    v: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Vec<T>> {
    if bias.len() != v.rows() {
        return Err(Error::Shape(format!(
            "{} disease vectors for {} heads",
            v.rows(),
            bias.len()
        )));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (vv, wv, bv) = (
        tape.constant(v.clone()),
        tape.constant(weights.clone()),
        tape.constant(bias.clone()),
    );
    let p = heads_on_tape(&mut tape, vv, wv, bv)?;
    Ok(tape.value(p).data().to_vec())
}

/// Full forward pass over one (monocular) document.
pub fn forward_encoded<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    doc: &EncodedDocument,
    train: bool,
    rng: &mut R,
) -> Result<Prediction> {
    let mut tape = Tape::new(&params.store);
    let out = params.forward_on_tape(&mut tape, doc, train, rng)?;
    let trace = match (out.attention, params.config.variant.uses_flat_encoder()) {
        (Some(alpha), false) => Some(AttentionTrace {
            alpha: rows_f64(tape.value(alpha)),
            sentence_index: (0..doc.len()).collect(),
        }),
        _ => None,
    };
    Ok(Prediction {
        probs: tape.value(out.probs).to_f64_vec(),
        trace,
        disease_vectors: rows_f64(tape.value(out.disease_vectors)),
    })
}

pub fn forward_monocular<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    sentences: &[Sentence],
    train: bool,
    rng: &mut R,
) -> Result<Prediction> {
    let doc = EncodedDocument::new(sentences, vocab, &params.config)?;
    forward_encoded(params, &doc, train, rng)
}
