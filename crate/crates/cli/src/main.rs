//! Command-line pipeline: generate, preprocess, train, evaluate, ablate,
//! explain and gradcheck. Results go to stdout as JSON (CSV for `explain`
//! without `--out`); progress goes to stderr.

mod config;

use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use needed::autodiff::{grad_check, Tape};
use needed::corpus::{
    generate_documents, split_corpus, write_corpus, Eye, Laterality, Section, Sentence, Vocabulary,
};
use needed::eval::{
    ablation_table, checkpoint_inputs, evaluate_split, export_attention, run_experiment,
    write_attention,
};
use needed::model::{AblationVariant, EncodedDocument, ModelConfig, ModelParams};
use needed::preprocess::{preprocess_corpus, write_monocular, FreqTable, PreprocessConfig};
use needed::train::{load_checkpoint, save_checkpoint, EpochRecord, BCE_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::RunConfig;

const USAGE_EXIT: u8 = 1;
const RUNTIME_EXIT: u8 = 2;
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Parser)]
#[command(
    name = "needed",
    version,
    about = "Per-eye multi-disease diagnosis from ophthalmology records"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Asymptomatic-description frequency threshold; overrides the config file.
    #[arg(long = "threshold-b")]
    threshold_b: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSONL.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter templated descriptions and split records into per-eye documents.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and save the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<AblationVariant>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split of its corpus.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate one variant, or all of them with --all.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        variant: Option<AblationVariant>,
        #[arg(long)]
        all: bool,
    },
    /// Export the attention heatmap of one record as CSV.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Record id, or its trailing number (17 selects doc-00017).
        #[arg(long = "doc-id")]
        doc_id: String,
        /// Eye whose per-eye document is explained.
        #[arg(long, default_value = "L", value_parser = parse_eye)]
        eye: Eye,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients through the model.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_eye(s: &str) -> std::result::Result<Eye, String> {
    match s {
        "L" | "l" | "left" => Ok(Eye::Left),
        "R" | "r" | "right" => Ok(Eye::Right),
        _ => Err(format!("expected L or R, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_EXIT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(RUNTIME_EXIT)
        }
    }
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        if let Some(gen) = cfg.generator.as_mut() {
            gen.seed = seed;
        }
    }
    if let Some(b) = common.threshold_b {
        cfg.train.threshold_b = b;
    }
    Ok(cfg)
}

fn log_epoch(rec: &EpochRecord) -> ControlFlow<()> {
    match &rec.validation {
        Some(v) => eprintln!(
            "epoch {} loss {:.6} val_macro_auc {:.6} val_macro_f1 {:.6}",
            rec.epoch, rec.train_loss, v.macro_auc, v.macro_f1
        ),
        None => eprintln!("epoch {} loss {:.6}", rec.epoch, rec.train_loss),
    }
    ControlFlow::Continue(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { common, out } => generate(&common, &out),
        Command::Preprocess { common, out } => preprocess(&common, &out),
        Command::Train {
            common,
            variant,
            out,
        } => train(&common, variant, &out),
        Command::Evaluate { common, checkpoint } => evaluate(&common, &checkpoint),
        Command::Ablate {
            common,
            variant,
            all,
        } => ablate(&common, variant, all),
        Command::Explain {
            common,
            checkpoint,
            doc_id,
            eye,
            out,
        } => explain(&common, &checkpoint, &doc_id, eye, out.as_deref()),
        Command::Gradcheck { seed } => gradcheck(seed.unwrap_or(0)),
    }
}

#[derive(Serialize)]
struct GenerateSummary {
    path: PathBuf,
    documents: usize,
    disease_names: Vec<String>,
}

fn generate(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut gen = cfg.generator.unwrap_or_default();
    if let Some(seed) = common.seed {
        gen.seed = seed;
    }
    let docs = generate_documents(&gen)?;
    write_corpus(&docs, out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} records to {}", docs.len(), out.display());
    emit(&GenerateSummary {
        path: out.to_path_buf(),
        documents: docs.len(),
        disease_names: gen.disease_names(),
    })
}

#[derive(Serialize)]
struct PreprocessSummary {
    path: PathBuf,
    records: usize,
    per_eye_documents: usize,
    threshold_b: f64,
    sentences_before: usize,
    sentences_after: usize,
}

fn preprocess(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let docs = cfg.documents()?;
    let [a, b, c] = cfg.train.split;
    let split = split_corpus(&docs, (a, b, c), cfg.train.seed)?;
    let table = FreqTable::build(&split.train)?;
    let pcfg = PreprocessConfig::with_threshold(cfg.train.threshold_b);
    let mono = preprocess_corpus(&docs, &table, &pcfg)?;
    write_monocular(&mono, out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!(
        "frequencies from {} training records; wrote {} per-eye documents",
        split.train.len(),
        mono.len()
    );
    emit(&PreprocessSummary {
        path: out.to_path_buf(),
        records: docs.len(),
        per_eye_documents: mono.len(),
        threshold_b: pcfg.threshold_b,
        sentences_before: docs.iter().map(|d| d.sentences.len()).sum(),
        sentences_after: mono.iter().map(|d| d.sentences.len()).sum(),
    })
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    best_epoch: usize,
    train_loss: Vec<f64>,
    test: needed::eval::MetricsReport,
}

fn train(common: &Common, variant: Option<AblationVariant>, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let variant = variant.unwrap_or(cfg.train.model.variant);
    let docs = cfg.documents()?;
    eprintln!(
        "training {variant} on {} records, seed {}",
        docs.len(),
        cfg.train.seed
    );
    let mut res = run_experiment(variant, &cfg.train, &docs, &cfg.disease_names(), log_epoch)?;
    res.checkpoint.metadata.corpus = cfg
        .corpus_path()
        .map(|p| p.canonicalize().unwrap_or(p).to_string_lossy().into_owned());
    save_checkpoint(&res.checkpoint, out)
        .with_context(|| format!("saving checkpoint to {}", out.display()))?;
    eprintln!(
        "saved checkpoint from epoch {} to {}",
        res.history.best_epoch,
        out.display()
    );
    emit(&TrainSummary {
        checkpoint: out.to_path_buf(),
        best_epoch: res.history.best_epoch,
        train_loss: res.history.losses(),
        test: res.report,
    })
}

/// Records of the checkpoint's corpus: the config's when given, else the
/// path stored at training time.
fn checkpoint_records(
    common: &Common,
    ck: &needed::train::Checkpoint,
) -> Result<Vec<needed::corpus::OemrDocument>> {
    if common.config.is_some() {
        return load_config(common)?.documents();
    }
    let path = ck
        .metadata
        .corpus
        .as_ref()
        .ok_or_else(|| anyhow!("checkpoint does not record its corpus; pass --config"))?;
    Ok(needed::corpus::load_corpus(Path::new(path))?)
}

fn evaluate(common: &Common, checkpoint: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let records = checkpoint_records(common, &ck)?;
    let tc = &ck.metadata.train_config;
    let [a, b, c] = tc.split;
    let split = split_corpus(&records, (a, b, c), common.seed.unwrap_or(tc.seed))?;
    let inputs = checkpoint_inputs(&ck, &split.test)?;
    eprintln!(
        "evaluating {} on {} test records",
        ck.params.config.variant,
        split.test.len()
    );
    emit(&evaluate_split(&ck, &inputs)?)
}

fn ablate(common: &Common, variant: Option<AblationVariant>, all: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let docs = cfg.documents()?;
    let names = cfg.disease_names();
    let variants: Vec<AblationVariant> = if all {
        AblationVariant::ALL.to_vec()
    } else {
        variant.into_iter().collect()
    };
    let mut reports = Vec::new();
    for v in variants {
        eprintln!("variant {v}");
        reports.push(run_experiment(v, &cfg.train, &docs, &names, log_epoch)?.report);
    }
    if all {
        emit(&ablation_table(&reports, cfg.train.seed))
    } else {
        emit(&reports[0])
    }
}

fn explain(
    common: &Common,
    checkpoint: &Path,
    doc_id: &str,
    eye: Eye,
    out: Option<&Path>,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let records = checkpoint_records(common, &ck)?;
    let matches_number = |id: &str| {
        let digits: String = id
            .chars()
            .rev()
            .take_while(char::is_ascii_digit)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        match (digits.parse::<u64>(), doc_id.parse::<u64>()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        }
    };
    let record = records
        .iter()
        .find(|r| r.id == doc_id)
        .or_else(|| records.iter().find(|r| matches_number(&r.id)))
        .ok_or_else(|| anyhow!("no record with id {doc_id}"))?;
    let inputs = checkpoint_inputs(&ck, std::slice::from_ref(record))?;
    let input = inputs
        .iter()
        .find(|d| d.eye.is_none_or(|e| e == eye))
        .ok_or_else(|| anyhow!("record {} has no document for that eye", record.id))?;
    match out {
        Some(path) => {
            export_attention(&ck, input, path)?;
            eprintln!(
                "wrote attention for {} ({:?}) to {}",
                record.id,
                eye,
                path.display()
            );
        }
        None => {
            write_attention(&ck, input, std::io::stdout().lock())?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckSummary {
    seed: u64,
    tolerance: f64,
    passed: bool,
    #[serde(flatten)]
    report: needed::autodiff::GradCheckReport,
}

/// Full-model check on a fixed three-sentence, two-disease document.
fn gradcheck(seed: u64) -> Result<()> {
    let vocab = Vocabulary::from_tokens(
        "lens opacity pressure elevated cornea clear left right eye".split(' '),
    );
    let cfg = ModelConfig {
        d_model: 8,
        word_layers: 2,
        n_heads: 2,
        n_labels: 2,
        vocab_size: vocab.len(),
        dropout: 0.0,
        ..Default::default()
    };
    let params = ModelParams::<f64>::init(&cfg, seed)?;
    let sentences = [
        Sentence::new(
            "lens opacity left eye",
            Section::ChiefComplaint,
            Laterality::Left,
            false,
        ),
        Sentence::new(
            "pressure elevated",
            Section::PresentIllness,
            Laterality::Unspecified,
            false,
        ),
        Sentence::new(
            "cornea clear",
            Section::Examination,
            Laterality::Unspecified,
            false,
        ),
    ];
    let doc = EncodedDocument::new(&sentences, &vocab, &cfg)?;
    let labels = [1.0, 0.0];
    let report = grad_check(
        &params.store,
        |tape: &mut Tape<'_, f64>| {
            let out =
                params.forward_on_tape(tape, &doc, false, &mut ChaCha8Rng::seed_from_u64(seed))?;
            tape.bce(out.probs, &labels, BCE_EPS)
        },
        GRADCHECK_EPS,
    )?;
    let passed = report.max_relative_error < GRADCHECK_TOLERANCE;
    eprintln!(
        "checked {} gradient entries, max relative error {:.3e}",
        report.elements_checked, report.max_relative_error
    );
    emit(&GradcheckSummary {
        seed,
        tolerance: GRADCHECK_TOLERANCE,
        passed,
        report,
    })?;
    if !passed {
        bail!("gradient check failed");
    }
    Ok(())
}
