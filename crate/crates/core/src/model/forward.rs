use rand::Rng;

use super::input::EncodedDocument;
use super::params::ModelParams;
use crate::autodiff::nn::sinusoidal_encoding;
use crate::autodiff::{Scalar, Tape, Var};
use crate::corpus::Vocabulary;
use crate::error::Result;

/// Upper bound on tokens encoded together in one block-diagonal attention pass.
const PACK_TOKENS: usize = 256;

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Pooled sentence embeddings `A` (`N x d`); absent for flat variants.
    pub sentence_embeddings: Option<Var>,
    /// Contextualized sentence representations `C`, one row per sentence.
    pub contextual: Var,
    /// Attention weights (`outputs x N`); absent without label attention.
    pub attention: Option<Var>,
    /// Disease-specific vectors `V` (`outputs x d`).
    pub disease_vectors: Var,
    pub probs: Var,
}

impl<T: Scalar> ModelParams<T> {
    fn embed<'p, R: Rng>(
        &self,
        tape: &mut Tape<'p, T>,
        ids: &[usize],
        positions: &[usize],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let emb = tape.embedding(self.ids.token_embedding, ids)?;
        let emb = tape.scale(emb, T::from_f64_lossy((d as f64).sqrt()));
        let pe = tape.constant(sinusoidal_encoding(positions, d));
        let x = tape.add(emb, pe)?;
        tape.dropout(x, self.config.dropout, train, rng)
    }

    fn word_stack<'p, R: Rng>(
        &self,
        tape: &mut Tape<'p, T>,
        mut x: Var,
        mask: Option<&[bool]>,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        for layer in &self.ids.word_layers {
            x = layer.forward(
                tape,
                x,
                mask,
                self.config.n_heads,
                self.config.dropout,
                train,
                rng,
            )?;
        }
        Ok(x)
    }

    /// Sentence embeddings `A`: each sentence is prefixed with its section's
    /// type-token, encoded by the word-level stack and average-pooled over all
    /// positions (type-token included). Several sentences share one pass with
    /// a block-diagonal attention mask, which is equivalent to encoding them
    /// one at a time.
    pub fn encode_sentences_on_tape<'p, R: Rng>(
        &self,
        tape: &mut Tape<'p, T>,
        doc: &EncodedDocument,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut blocks = Vec::new();
        let mut start = 0;
        while start < doc.sentences.len() {
            let mut end = start;
            let mut tokens = 0;
            while end < doc.sentences.len()
                && (end == start || tokens + doc.sentences[end].sequence_len() <= PACK_TOKENS)
            {
                tokens += doc.sentences[end].sequence_len();
                end += 1;
            }
            blocks.push(self.encode_block(tape, &doc.sentences[start..end], train, rng)?);
            start = end;
        }
        if blocks.len() == 1 {
            Ok(blocks[0])
        } else {
            tape.concat_rows(&blocks)
        }
    }

    fn encode_block<'p, R: Rng>(
        &self,
        tape: &mut Tape<'p, T>,
        sentences: &[super::input::EncodedSentence],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        for (i, s) in sentences.iter().enumerate() {
            ids.push(Vocabulary::type_token(s.section));
            ids.extend_from_slice(&s.ids);
            positions.extend(0..s.sequence_len());
            segments.extend(std::iter::repeat_n(Some(i), s.sequence_len()));
        }
        let mask: Option<Vec<bool>> = (sentences.len() > 1).then(|| {
            let t = segments.len();
            let mut m = vec![false; t * t];
            for q in 0..t {
                for k in 0..t {
                    m[q * t + k] = segments[q] == segments[k];
                }
            }
            m
        });
        let x = self.embed(tape, &ids, &positions, train, rng)?;
        let h = self.word_stack(tape, x, mask.as_deref(), train, rng)?;
        tape.segment_mean(h, &segments, sentences.len())
    }

    /// Single-sequence encoding of the whole document: type-tokens at section
    /// boundaries, truncation at `max_tokens_flat`, mean pooling. `1 x d`.
    pub fn encode_flat_on_tape<'p, R: Rng>(
        &self,
        tape: &mut Tape<'p, T>,
        doc: &EncodedDocument,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let ids = doc.flat_ids(self.config.max_tokens_flat);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let x = self.embed(tape, &ids, &positions, train, rng)?;
        let h = self.word_stack(tape, x, None, train, rng)?;
        tape.masked_mean_pool(h, &vec![true; ids.len()])
    }

    /// Contextualizes `A` with the sentence-level layer (no positional encoding).
    pub fn sentence_level_on_tape<'p, R: Rng>(
        &self,
        tape: &mut Tape<'p, T>,
        a: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match &self.ids.sentence_layer {
            Some(layer) => layer.forward(
                tape,
                a,
                None,
                self.config.n_heads,
                self.config.dropout,
                train,
                rng,
            ),
            None => Ok(a),
        }
    }

    pub fn forward_on_tape<'p, R: Rng>(
        &self,
        tape: &mut Tape<'p, T>,
        doc: &EncodedDocument,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        let variant = self.config.variant;
        let (a, c) = if variant.uses_flat_encoder() {
            (None, self.encode_flat_on_tape(tape, doc, train, rng)?)
        } else {
            let a = self.encode_sentences_on_tape(tape, doc, train, rng)?;
            (Some(a), self.sentence_level_on_tape(tape, a, train, rng)?)
        };
        let outputs = self.config.n_outputs();
        let (v, attention) = match self.ids.label_embeddings {
            Some(e) => {
                let e = tape.param(e);
                let (v, alpha) = label_attention_on_tape(tape, c, e)?;
                (v, Some(alpha))
            }
            None => {
                let n = tape.value(c).rows();
                let pooled = tape.masked_mean_pool(c, &vec![true; n])?;
                let v = tape.concat_rows(&vec![pooled; outputs])?;
                (v, None)
            }
        };
        let w = tape.param(self.ids.head_weights);
        let b = tape.param(self.ids.head_bias);
        let probs = heads_on_tape(tape, v, w, b)?;
        Ok(ForwardVars {
            sentence_embeddings: a,
            contextual: c,
            attention,
            disease_vectors: v,
            probs,
        })
    }
}

/// `alpha = softmax(E C^T / sqrt(d))` row-wise and `V = alpha C`, with `C`
/// holding one sentence per row.
pub fn label_attention_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    c: Var,
    labels: Var,
) -> Result<(Var, Var)> {
    let d = tape.value(c).cols();
    let scores = tape.matmul_t(labels, c, false, true)?;
    let scores = tape.scale(scores, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
    let alpha = tape.softmax_rows(scores, None)?;
    let v = tape.matmul(alpha, c)?;
    Ok((v, alpha))
}

/// Independent affine head per row of `V` (`w_l . v_l + b_l`), then sigmoid.
pub fn heads_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    v: Var,
    weights: Var,
    bias: Var,
) -> Result<Var> {
    let prod = tape.mul(v, weights)?;
    let logits = tape.row_sums(prod);
    let k = tape.value(logits).rows();
    let logits = tape.reshape(logits, &[k])?;
    let logits = tape.add(logits, bias)?;
    Ok(tape.sigmoid(logits))
}
