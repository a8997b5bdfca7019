//! Metrics, split evaluation, the ablation harness and attention export.

mod metrics;

use std::ops::ControlFlow;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{auc_scores, binary_auc, f1_scores, AucScores, Counts, F1Scores};

use crate::corpus::{split_corpus, OemrDocument, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{
    forward_encoded, AblationVariant, AttentionTrace, EncodedDocument, ModelInput, ModelParams,
    Prediction,
};
use crate::preprocess::{preprocess_corpus, FreqTable, PreprocessConfig};
use crate::train::{
    train_loop_with, Checkpoint, EpochRecord, TrainConfig, TrainHistory, ValidationMetrics,
};

/// Probabilities at or above this value count as positive predictions.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: AblationVariant,
    pub seed: u64,
    /// Per-eye prediction instances scored.
    pub instances: usize,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub per_label: Vec<LabelReport>,
    pub excluded_from_macro_f1: usize,
    pub excluded_from_macro_auc: usize,
}

/// Eval-mode probabilities for each document.
pub fn score_documents(
    params: &ModelParams<f32>,
    docs: &[EncodedDocument],
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    docs.iter()
        .map(|d| Ok(forward_encoded(params, d, false, &mut rng)?.probs))
        .collect()
}

/// Rows of per-eye scores and truths. The unsplit variant predicts left
/// labels followed by right labels, so each of its rows becomes two.
pub fn per_eye_rows(
    variant: AblationVariant,
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    if variant != AblationVariant::WoP {
        return (scores.to_vec(), labels.to_vec());
    }
    let halve = |row: &[f64]| {
        let (l, r) = row.split_at(row.len() / 2);
        [l.to_vec(), r.to_vec()]
    };
    let halve_b = |row: &[bool]| {
        let (l, r) = row.split_at(row.len() / 2);
        [l.to_vec(), r.to_vec()]
    };
    (
        scores.iter().flat_map(|r| halve(r)).collect(),
        labels.iter().flat_map(|r| halve_b(r)).collect(),
    )
}

fn thresholded(scores: &[Vec<f64>]) -> Vec<Vec<bool>> {
    scores
        .iter()
        .map(|r| r.iter().map(|p| *p >= DECISION_THRESHOLD).collect())
        .collect()
}

pub fn summarize(
    variant: AblationVariant,
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
) -> Result<ValidationMetrics> {
    let (s, t) = per_eye_rows(variant, scores, labels);
    let f1 = f1_scores(&thresholded(&s), &t)?;
    let auc = auc_scores(&s, &t)?;
    Ok(ValidationMetrics {
        macro_auc: auc.macro_auc,
        micro_auc: auc.micro_auc,
        macro_f1: f1.macro_f1,
        micro_f1: f1.micro_f1,
    })
}

/// Full report from raw probabilities and truths.
pub fn build_report(
    variant: AblationVariant,
    seed: u64,
    names: &[String],
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
) -> Result<MetricsReport> {
    let (s, t) = per_eye_rows(variant, scores, labels);
    let f1 = f1_scores(&thresholded(&s), &t)?;
    let auc = auc_scores(&s, &t)?;
    let per_label = f1
        .counts
        .iter()
        .enumerate()
        .map(|(l, c)| LabelReport {
            name: names
                .get(l)
                .cloned()
                .unwrap_or_else(|| format!("label_{l}")),
            precision: c.precision(),
            recall: c.recall(),
            f1: f1.per_label[l],
            auc: auc.per_label[l],
            positives: c.tp + c.fn_,
        })
        .collect();
    Ok(MetricsReport {
        variant,
        seed,
        instances: s.len(),
        macro_f1: f1.macro_f1,
        micro_f1: f1.micro_f1,
        macro_auc: auc.macro_auc,
        micro_auc: auc.micro_auc,
        per_label,
        excluded_from_macro_f1: f1.excluded,
        excluded_from_macro_auc: auc.excluded,
    })
}

/// Scores `docs` (already prepared for the checkpoint's variant) in eval mode.
pub fn evaluate_split(checkpoint: &Checkpoint, docs: &[ModelInput]) -> Result<MetricsReport> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("no documents to evaluate".into()));
    }
    let params = &checkpoint.params;
    let outputs = params.config.n_outputs();
    if let Some(bad) = docs.iter().find(|d| d.labels.len() != outputs) {
        return Err(Error::config(format!(
            "document {} has {} labels but the checkpoint predicts {outputs}",
            bad.id,
            bad.labels.len()
        )));
    }
    let encoded: Vec<EncodedDocument> = docs
        .iter()
        .map(|d| {
            EncodedDocument::new(
                &d.sentences,
                &checkpoint.metadata.vocabulary,
                &params.config,
            )
        })
        .collect::<Result<_>>()?;
    let scores = score_documents(params, &encoded)?;
    let labels: Vec<Vec<bool>> = docs.iter().map(|d| d.labels.0.clone()).collect();
    build_report(
        params.config.variant,
        checkpoint.metadata.train_config.seed,
        &checkpoint.metadata.disease_names,
        &scores,
        &labels,
    )
}

/// Model inputs for one split under a variant: filtered per-eye documents,
/// or whole records for the unsplit variant.
pub fn model_inputs(
    variant: AblationVariant,
    records: &[OemrDocument],
    table: &FreqTable,
    cfg: &PreprocessConfig,
) -> Result<Vec<ModelInput>> {
    if variant.uses_preprocessing() {
        Ok(preprocess_corpus(records, table, cfg)?
            .into_iter()
            .map(ModelInput::from)
            .collect())
    } else {
        Ok(records.iter().map(ModelInput::unsplit).collect())
    }
}

/// Inputs for `records` prepared the way the checkpoint's training data was.
pub fn checkpoint_inputs(
    checkpoint: &Checkpoint,
    records: &[OemrDocument],
) -> Result<Vec<ModelInput>> {
    let variant = checkpoint.params.config.variant;
    let cfg = PreprocessConfig::with_threshold(checkpoint.metadata.train_config.threshold_b);
    match (
        &checkpoint.metadata.freq_table,
        variant.uses_preprocessing(),
    ) {
        (Some(table), _) => model_inputs(variant, records, table, &cfg),
        (None, false) => Ok(records.iter().map(ModelInput::unsplit).collect()),
        (None, true) => Err(Error::config(
            "checkpoint carries no sentence frequency table for preprocessing",
        )),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub freq_table: FreqTable,
    pub train: Vec<ModelInput>,
    pub val: Vec<ModelInput>,
    pub test: Vec<ModelInput>,
    pub test_records: Vec<OemrDocument>,
}

/// Splits records by `cfg.seed`, then builds the vocabulary and sentence
/// frequencies on the training part only.
pub fn prepare_data(
    variant: AblationVariant,
    cfg: &TrainConfig,
    corpus: &[OemrDocument],
) -> Result<PreparedData> {
    let [a, b, c] = cfg.split;
    let split = split_corpus(corpus, (a, b, c), cfg.seed)?;
    let vocab = Vocabulary::build(&split.train)?;
    let table = FreqTable::build(&split.train)?;
    let pcfg = PreprocessConfig::with_threshold(cfg.threshold_b);
    Ok(PreparedData {
        train: model_inputs(variant, &split.train, &table, &pcfg)?,
        val: model_inputs(variant, &split.val, &table, &pcfg)?,
        test: model_inputs(variant, &split.test, &table, &pcfg)?,
        vocab,
        freq_table: table,
        test_records: split.test,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub report: MetricsReport,
}

/// Prepare, train and evaluate on the test split.
pub fn run_experiment<F>(
    variant: AblationVariant,
    cfg: &TrainConfig,
    corpus: &[OemrDocument],
    disease_names: &[String],
    on_epoch: F,
) -> Result<ExperimentResult>
where
    F: FnMut(&EpochRecord) -> ControlFlow<()>,
{
    let data = prepare_data(variant, cfg, corpus)?;
    let mut cfg = cfg.clone();
    cfg.model.variant = variant;
    let (mut checkpoint, history) =
        train_loop_with(&cfg, &data.vocab, &data.train, &data.val, on_epoch)?;
    if !disease_names.is_empty() {
        checkpoint.metadata.disease_names = disease_names.to_vec();
    }
    checkpoint.metadata.freq_table = Some(data.freq_table);
    let report = evaluate_split(&checkpoint, &data.test)?;
    Ok(ExperimentResult {
        checkpoint,
        history,
        report,
    })
}

pub fn run_ablation(
    variant: AblationVariant,
    cfg: &TrainConfig,
    corpus: &[OemrDocument],
) -> Result<MetricsReport> {
    Ok(run_experiment(variant, cfg, corpus, &[], |_| ControlFlow::Continue(()))?.report)
}

/// One row per variant, in the order full, wo_p, wo_c, wo_s, wo_l, wo_w.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub macro_auc: f64,
    pub micro_auc: f64,
}

impl From<&MetricsReport> for AblationRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            variant: r.variant,
            macro_f1: r.macro_f1,
            micro_f1: r.micro_f1,
            macro_auc: r.macro_auc,
            micro_auc: r.micro_auc,
        }
    }
}

pub fn ablation_table(reports: &[MetricsReport], seed: u64) -> AblationTable {
    AblationTable {
        seed,
        rows: reports.iter().map(AblationRow::from).collect(),
    }
}

/// Eval-mode forward pass over one prepared document.
pub fn predict(checkpoint: &Checkpoint, doc: &ModelInput) -> Result<Prediction> {
    let params = &checkpoint.params;
    let encoded = EncodedDocument::new(
        &doc.sentences,
        &checkpoint.metadata.vocabulary,
        &params.config,
    )?;
    forward_encoded(params, &encoded, false, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Writes the attention trace of `doc` as CSV: a header of disease names,
/// then one row per sentence (its text, then one weight per disease).
pub fn export_attention(
    checkpoint: &Checkpoint,
    doc: &ModelInput,
    path: &Path,
) -> Result<AttentionTrace> {
    write_attention(checkpoint, doc, std::fs::File::create(path)?)
}

/// [`export_attention`] into any writer.
pub fn write_attention<W: std::io::Write>(
    checkpoint: &Checkpoint,
    doc: &ModelInput,
    out: W,
) -> Result<AttentionTrace> {
    let trace = predict(checkpoint, doc)?.trace.ok_or_else(|| {
        Error::config(format!(
            "variant {} has no sentence attention",
            checkpoint.params.config.variant
        ))
    })?;
    let names = &checkpoint.metadata.disease_names;
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["sentence".to_string()];
    header.extend(names.iter().cloned());
    writer.write_record(&header).map_err(csv_error)?;
    for (n, &src) in trace.sentence_index.iter().enumerate() {
        let mut row = vec![doc.sentences[src].text()];
        row.extend(trace.alpha.iter().map(|alpha_l| alpha_l[n].to_string()));
        writer.write_record(&row).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(trace)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Agreement between attention and planted evidence: among positive labels
/// predicted correctly, how often the most attended sentence is indicative
/// of that label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplanationAgreement {
    pub hits: usize,
    pub total: usize,
}

impl ExplanationAgreement {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

pub fn explanation_agreement<F>(
    checkpoint: &Checkpoint,
    docs: &[ModelInput],
    is_indicative: F,
) -> Result<ExplanationAgreement>
where
    F: Fn(&Sentence, usize) -> bool,
{
    let mut out = ExplanationAgreement::default();
    for doc in docs {
        let pred = predict(checkpoint, doc)?;
        let Some(trace) = pred.trace else {
            return Err(Error::config("variant has no sentence attention"));
        };
        let top = trace.argmax_sentences();
        for (l, p) in pred.probs.iter().enumerate() {
            if doc.labels.get(l) && *p >= DECISION_THRESHOLD {
                out.total += 1;
                if is_indicative(&doc.sentences[top[l]], l) {
                    out.hits += 1;
                }
            }
        }
    }
    Ok(out)
}
