//! Binary cross-entropy training with AdamW and best-checkpoint selection.

mod checkpoint;
mod optim;

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    check_compatible, load_checkpoint, load_manifest, save_checkpoint, Checkpoint, Manifest,
    TensorEntry, TrainingMetadata, FORMAT_VERSION, MANIFEST_FILE, PARAMS_FILE,
};
pub use optim::{optimizer_step, AdamState, AdamWConfig};

use crate::autodiff::{bce_value, Gradients, Tape};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::{score_documents, summarize};
use crate::model::{AblationVariant, EncodedDocument, ModelConfig, ModelInput, ModelParams};
use crate::preprocess::DEFAULT_THRESHOLD_B;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// RNG streams derived from the single training seed.
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Overrides `model.dropout`.
    pub dropout: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub threshold_b: f64,
    /// Train, validation and test fractions of the record-level split.
    pub split: [f64; 3],
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            batch_size: 32,
            dropout: 0.1,
            max_epochs: 50,
            seed: 0,
            threshold_b: DEFAULT_THRESHOLD_B,
            split: [0.7, 0.15, 0.15],
            grad_clip: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold_b) {
            return Err(Error::config(format!(
                "threshold B {} outside [0, 1]",
                self.threshold_b
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config(format!(
                    "gradient clip norm {c} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::new(self.learning_rate, self.weight_decay)
    }

    /// Model configuration with data-dependent sizes filled in.
    pub fn model_config(&self, vocab_size: usize, n_labels: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            n_labels,
            dropout: self.dropout,
            ..self.model.clone()
        }
    }
}

/// Summed over labels for one instance; clamped probabilities keep it finite.
pub fn bce_loss(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let y: Vec<f64> = labels.iter().map(|b| f64::from(u8::from(*b))).collect();
    Ok(bce_value(probs, &y, BCE_EPS))
}

/// Mean of per-instance losses.
pub fn batch_bce_loss(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape(format!(
            "{} prediction rows for {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        total += bce_loss(p, y)?;
    }
    Ok(total / probs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-document loss over the epoch, measured in training mode.
    pub train_loss: f64,
    pub validation: Option<ValidationMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest validation macro-AUC (first on ties), or the last
    /// epoch when there is no validation data.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

fn label_width(docs: &[ModelInput]) -> Result<usize> {
    let width = docs[0].labels.len();
    if let Some(bad) = docs.iter().find(|d| d.labels.len() != width) {
        return Err(Error::shape(format!(
            "document {} has {} labels, expected {width}",
            bad.id,
            bad.labels.len()
        )));
    }
    Ok(width)
}

fn encode_all(
    docs: &[ModelInput],
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<Vec<EncodedDocument>> {
    docs.iter()
        .map(|d| EncodedDocument::new(&d.sentences, vocab, cfg))
        .collect()
}

pub fn train_loop(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    train: &[ModelInput],
    val: &[ModelInput],
) -> Result<(Checkpoint, TrainHistory)> {
    train_loop_with(cfg, vocab, train, val, |_| ControlFlow::Continue(()))
}

/// Like [`train_loop`], calling `on_epoch` after every epoch; returning
/// `ControlFlow::Break` ends training early.
pub fn train_loop_with<F>(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    train: &[ModelInput],
    val: &[ModelInput],
    mut on_epoch: F,
) -> Result<(Checkpoint, TrainHistory)>
where
    F: FnMut(&EpochRecord) -> ControlFlow<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set has no documents".into()));
    }
    let width = label_width(train)?;
    let n_labels = if cfg.model.variant == AblationVariant::WoP {
        width / 2
    } else {
        width
    };
    let model_cfg = cfg.model_config(vocab.len(), n_labels);
    let mut params = ModelParams::<f32>::init(&model_cfg, cfg.seed)?;
    if params.config.n_outputs() != width {
        return Err(Error::shape(format!(
            "{width} labels per document for {} model outputs",
            params.config.n_outputs()
        )));
    }
    if !val.is_empty() && label_width(val)? != width {
        return Err(Error::shape(
            "validation labels differ in width from training labels",
        ));
    }

    let encoded = encode_all(train, vocab, &model_cfg)?;
    let targets: Vec<Vec<f32>> = train
        .iter()
        .map(|d| d.labels.0.iter().map(|b| f32::from(u8::from(*b))).collect())
        .collect();
    let val_encoded = encode_all(val, vocab, &model_cfg)?;
    let val_labels: Vec<Vec<bool>> = val.iter().map(|d| d.labels.0.clone()).collect();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let optimizer = cfg.optimizer();
    let mut state = AdamState::new(&params.store);

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&params.store);
            let weight = 1.0 / batch.len() as f32;
            for &i in batch {
                let mut tape = Tape::new(&params.store);
                let out = params.forward_on_tape(&mut tape, &encoded[i], true, &mut dropout_rng)?;
                let loss = tape.bce(out.probs, &targets[i], BCE_EPS)?;
                epoch_loss += f64::from(tape.value(loss).data()[0]);
                grads.add_scaled(&tape.backward(loss)?, weight);
            }
            if let Some(limit) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > limit {
                    grads.scale((limit / norm) as f32);
                }
            }
            optimizer_step(&mut params.store, &grads, &mut state, &optimizer);
        }
        let train_loss = epoch_loss / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::config(format!(
                "training diverged at epoch {epoch} (loss {train_loss})"
            )));
        }

        let validation = if val.is_empty() {
            None
        } else {
            let scores = score_documents(&params, &val_encoded)?;
            Some(summarize(model_cfg.variant, &scores, &val_labels)?)
        };
        match validation {
            Some(m) => {
                if best.as_ref().is_none_or(|(b, _)| m.macro_auc > *b) {
                    best = Some((m.macro_auc, params.clone()));
                    history.best_epoch = epoch;
                }
            }
            None => history.best_epoch = epoch,
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            validation,
        };
        let flow = on_epoch(&record);
        history.epochs.push(record);
        if flow.is_break() {
            break;
        }
    }

    let epochs_run = history.epochs.len();
    let params = match best {
        Some((_, p)) => p,
        None => params,
    };
    let metadata = TrainingMetadata {
        train_config: cfg.clone(),
        vocabulary: vocab.clone(),
        disease_names: (0..n_labels).map(|l| format!("label_{l}")).collect(),
        freq_table: None,
        corpus: None,
        best_epoch: Some(history.best_epoch),
        epochs_run,
    };
    Ok((Checkpoint { params, metadata }, history))
}
