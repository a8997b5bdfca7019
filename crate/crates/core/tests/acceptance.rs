//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured quantity and the tolerance it was held to.

use std::collections::BTreeSet;
use std::ops::ControlFlow;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use needed::autodiff::{grad_check, Tape};
use needed::corpus::{
    generate_documents, GenConfig, Laterality, OemrDocument, Section, Sentence, Vocabulary,
};
use needed::eval::{
    auc_scores, evaluate_split, explanation_agreement, f1_scores, prepare_data, run_experiment,
    ExperimentResult,
};
use needed::model::{
    forward_encoded, AblationVariant, EncodedDocument, ModelConfig, ModelInput, ModelParams,
};
use needed::preprocess::{filter_asymptomatic, normalize_tokens, FreqTable, PreprocessConfig};
use needed::train::{load_checkpoint, save_checkpoint, train_loop_with, TrainConfig, BCE_EPS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, pass: bool, detail: String) {
    println!(
        "criterion {n}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn continue_always(_: &needed::train::EpochRecord) -> ControlFlow<()> {
    ControlFlow::Continue(())
}

// 1. Gradient correctness ----------------------------------------------------

const GRAD_MAX_REL: f64 = 1e-4;
const GRAD_TIME: Duration = Duration::from_secs(60);

#[test]
fn criterion_1_gradient_check() {
    let start = Instant::now();
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
    let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
    let sentences = vec![
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
    let doc = EncodedDocument::new(&sentences, &vocab, &cfg).unwrap();
    let labels = [1.0, 0.0];
    let build = |tape: &mut Tape<'_, f64>| {
        let out = params.forward_on_tape(tape, &doc, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        tape.bce(out.probs, &labels, BCE_EPS)
    };
    let rep = grad_check(&params.store, build, 1e-6).unwrap();
    let elapsed = start.elapsed();
    let pass = rep.max_relative_error < GRAD_MAX_REL && elapsed < GRAD_TIME;
    report(
        1,
        pass,
        format!(
            "max relative error {:.3e} < {GRAD_MAX_REL:e} over {} elements, worst {}[{}], {:.1?} < {:?}",
            rep.max_relative_error, rep.elements_checked, rep.worst_param, rep.worst_index, elapsed, GRAD_TIME
        ),
    );
    assert!(pass);
}

// 2. Overfit -----------------------------------------------------------------

const OVERFIT_LOSS: f64 = 0.05;
const OVERFIT_EPOCHS: usize = 500;
const OVERFIT_TIME: Duration = Duration::from_secs(300);

#[test]
fn criterion_2_overfit_small_set() {
    let start = Instant::now();
    // 32 generated records, each split into two per-eye instances.
    let records = generate_documents(&GenConfig {
        n_docs: 32,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let table = FreqTable::build(&records).unwrap();
    let docs: Vec<ModelInput> =
        needed::preprocess::preprocess_corpus(&records, &table, &PreprocessConfig::default())
            .unwrap()
            .into_iter()
            .map(ModelInput::from)
            .collect();
    assert_eq!(docs.len(), 64);
    let vocab = Vocabulary::build(&records).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-4,
        weight_decay: 1e-2,
        dropout: 0.1,
        batch_size: 32,
        max_epochs: OVERFIT_EPOCHS,
        seed: 2,
        model: ModelConfig {
            d_model: 64,
            word_layers: 2,
            n_heads: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut reached = None;
    let (_, history) = train_loop_with(&cfg, &vocab, &docs, &[], |rec| {
        if rec.epoch % 50 == 0 {
            eprintln!("overfit epoch {} loss {:.4}", rec.epoch, rec.train_loss);
        }
        if rec.train_loss < OVERFIT_LOSS {
            reached = Some(rec.epoch + 1);
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    let elapsed = start.elapsed();
    let final_loss = history.epochs.last().unwrap().train_loss;
    let pass = reached.is_some() && elapsed < OVERFIT_TIME;
    report(
        2,
        pass,
        format!(
            "train loss {final_loss:.4} after {} epochs (target < {OVERFIT_LOSS} within {OVERFIT_EPOCHS}), {:.1?} < {:?}",
            history.epochs.len(),
            elapsed,
            OVERFIT_TIME
        ),
    );
    assert!(pass);
}

// 3 and 8. Planted-signal learning and explainability -----------------------

const PLANTED_DOCS: usize = 2000;
const PLANTED_MACRO_AUC: f64 = 0.95;
const PLANTED_MACRO_F1: f64 = 0.85;
const PLANTED_TIME: Duration = Duration::from_secs(15 * 60);
const EXPLAIN_RATE: f64 = 0.80;

fn planted_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-4,
        weight_decay: 1e-2,
        dropout: 0.1,
        batch_size: 32,
        max_epochs: 10,
        seed: 5,
        threshold_b: 0.1,
        split: [0.7, 0.15, 0.15],
        model: ModelConfig {
            d_model: 64,
            word_layers: 2,
            n_heads: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn planted_gen() -> GenConfig {
    GenConfig {
        n_docs: PLANTED_DOCS,
        seed: 17,
        ..Default::default()
    }
}

struct Planted {
    result: ExperimentResult,
    test: Vec<ModelInput>,
    elapsed: Duration,
}

fn planted() -> &'static Planted {
    static CELL: OnceLock<Planted> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let gen = planted_gen();
        let corpus = generate_documents(&gen).unwrap();
        let cfg = planted_config();
        let result = run_experiment(
            AblationVariant::Full,
            &cfg,
            &corpus,
            &gen.disease_names(),
            |rec| {
                eprintln!(
                    "planted epoch {} loss {:.4} val {:?}",
                    rec.epoch, rec.train_loss, rec.validation
                );
                ControlFlow::Continue(())
            },
        )
        .unwrap();
        let test = prepare_data(AblationVariant::Full, &cfg, &corpus)
            .unwrap()
            .test;
        Planted {
            result,
            test,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_3_planted_signal() {
    let p = planted();
    let r = &p.result.report;
    let pass = r.macro_auc >= PLANTED_MACRO_AUC
        && r.macro_f1 >= PLANTED_MACRO_F1
        && p.elapsed < PLANTED_TIME;
    report(
        3,
        pass,
        format!(
            "test macro-AUC {:.4} >= {PLANTED_MACRO_AUC}, macro-F1 {:.4} >= {PLANTED_MACRO_F1}, {} instances, {:.1?} < {:?}",
            r.macro_auc, r.macro_f1, r.instances, p.elapsed, PLANTED_TIME
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_explainability() {
    let p = planted();
    let gen = planted_gen();
    let agreement = explanation_agreement(&p.result.checkpoint, &p.test, |s, l| {
        gen.indicative_diseases(s).contains(&l)
    })
    .unwrap();
    let pass = agreement.total > 0 && agreement.rate() >= EXPLAIN_RATE;
    report(
        8,
        pass,
        format!(
            "argmax-attention sentence indicative for {}/{} correctly predicted positives = {:.3} >= {EXPLAIN_RATE}",
            agreement.hits,
            agreement.total,
            agreement.rate()
        ),
    );
    assert!(pass);
}

// 4. Ablation directionality -------------------------------------------------

const ABLATION_MARGIN: f64 = 0.03;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

#[test]
fn criterion_4_full_beats_unsplit() {
    let mut full = Vec::new();
    let mut wo_p = Vec::new();
    for seed in ABLATION_SEEDS {
        // Every finding is confined to one eye, so the per-eye labels of a
        // record disagree wherever a disease is present.
        let gen = GenConfig {
            n_docs: 600,
            bilateral_rate: 0.0,
            seed: 100 + seed,
            ..Default::default()
        };
        let corpus = generate_documents(&gen).unwrap();
        let cfg = TrainConfig {
            seed,
            max_epochs: 8,
            ..planted_config()
        };
        for (variant, out) in [
            (AblationVariant::Full, &mut full),
            (AblationVariant::WoP, &mut wo_p),
        ] {
            let res = run_experiment(
                variant,
                &cfg,
                &corpus,
                &gen.disease_names(),
                continue_always,
            )
            .unwrap();
            eprintln!(
                "seed {seed} {variant}: macro-AUC {:.4}",
                res.report.macro_auc
            );
            out.push(res.report.macro_auc);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (f, w) = (mean(&full), mean(&wo_p));
    let pass = f - w >= ABLATION_MARGIN;
    report(
        4,
        pass,
        format!("mean macro-AUC full {f:.4} vs wo_p {w:.4}, gap {:.4} >= {ABLATION_MARGIN} over seeds {ABLATION_SEEDS:?}", f - w),
    );
    assert!(pass);
}

// 5. Permutation invariance --------------------------------------------------

const PERM_DOCS: usize = 100;
const PERM_TOL: f64 = 1e-5;
/// Sentence weights may differ only by summation-order rounding.
const TRACE_TOL: f64 = 1e-12;

#[test]
fn criterion_5_permutation_invariance() {
    let records = generate_documents(&GenConfig {
        n_docs: PERM_DOCS,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let vocab = Vocabulary::build(&records).unwrap();
    let cfg = ModelConfig {
        d_model: 32,
        word_layers: 2,
        n_heads: 4,
        vocab_size: vocab.len(),
        ..Default::default()
    };
    let params = ModelParams::<f64>::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_prob = 0.0f64;
    let mut trace_exact = true;
    for rec in &records {
        let doc = EncodedDocument::new(&rec.sentences, &vocab, &cfg).unwrap();
        let mut order: Vec<usize> = (0..doc.len()).collect();
        order.shuffle(&mut rng);
        let a = forward_encoded(&params, &doc, false, &mut rng).unwrap();
        let b = forward_encoded(&params, &doc.permuted(&order), false, &mut rng).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            worst_prob = worst_prob.max((x - y).abs());
        }
        let (ta, tb) = (a.trace.unwrap(), b.trace.unwrap());
        for (row_a, row_b) in ta.alpha.iter().zip(&tb.alpha) {
            for (pos, src) in order.iter().enumerate() {
                if (row_b[pos] - row_a[*src]).abs() > TRACE_TOL {
                    trace_exact = false;
                }
            }
        }
    }
    let pass = worst_prob < PERM_TOL && trace_exact;
    report(
        5,
        pass,
        format!("max |dp| {worst_prob:.2e} < {PERM_TOL:e} over {PERM_DOCS} documents, traces permute with sentences within {TRACE_TOL:e}: {trace_exact}"),
    );
    assert!(pass);
}

// 6. Metric oracles ----------------------------------------------------------

fn oracle_f1(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> (f64, f64, usize) {
    let l = truth[0].len();
    let mut table = vec![[0usize; 3]; l];
    for (p, t) in pred.iter().zip(truth) {
        for j in 0..l {
            if p[j] && t[j] {
                table[j][0] += 1;
            } else if p[j] {
                table[j][1] += 1;
            } else if t[j] {
                table[j][2] += 1;
            }
        }
    }
    let f1 = |[tp, fp, fn_]: [usize; 3]| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    let kept: Vec<f64> = table
        .iter()
        .filter(|c| c.iter().sum::<usize>() > 0)
        .map(|c| f1(*c))
        .collect();
    let macro_f1 = if kept.is_empty() {
        1.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    let pooled = table
        .iter()
        .fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
    let micro = if pooled.iter().sum::<usize>() == 0 {
        1.0
    } else {
        f1(pooled)
    };
    (macro_f1, micro, l - kept.len())
}

fn oracle_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let (mut credit, mut pairs) = (0.0, 0usize);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if truth[i] && !truth[j] {
                pairs += 1;
                credit += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| credit / pairs as f64)
}

#[test]
fn criterion_6_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=20);
        let l = rng.gen_range(1..=4);
        // Coarse score grid so ties are common.
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..l).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect())
            .collect();
        let truth: Vec<Vec<bool>> = (0..n)
            .map(|_| (0..l).map(|_| rng.gen_bool(0.4)).collect())
            .collect();
        let pred: Vec<Vec<bool>> = scores
            .iter()
            .map(|r| r.iter().map(|s| *s >= 0.5).collect())
            .collect();

        let f = f1_scores(&pred, &truth).unwrap();
        if (f.macro_f1, f.micro_f1, f.excluded) != oracle_f1(&pred, &truth) {
            mismatches += 1;
        }
        let a = auc_scores(&scores, &truth).unwrap();
        let per: Vec<Option<f64>> = (0..l)
            .map(|j| {
                let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
                let t: Vec<bool> = truth.iter().map(|r| r[j]).collect();
                oracle_auc(&s, &t)
            })
            .collect();
        let kept: Vec<f64> = per.iter().flatten().copied().collect();
        let macro_auc = if kept.is_empty() {
            0.5
        } else {
            kept.iter().sum::<f64>() / kept.len() as f64
        };
        let flat_s: Vec<f64> = scores.concat();
        let flat_t: Vec<bool> = truth.concat();
        let micro_auc = oracle_auc(&flat_s, &flat_t).unwrap_or(0.5);
        if a.per_label != per || a.macro_auc != macro_auc || a.micro_auc != micro_auc {
            mismatches += 1;
        }
    }

    let f = f1_scores(
        &[vec![true, true], vec![true, false]],
        &[vec![true, true], vec![false, true]],
    )
    .unwrap();
    let f1_worked = f.per_label == vec![Some(2.0 / 3.0), Some(2.0 / 3.0)]
        && f.macro_f1 == 2.0 / 3.0
        && f.micro_f1 == 2.0 / 3.0;
    let a = auc_scores(
        &[vec![0.1], vec![0.4], vec![0.35], vec![0.8]],
        &[vec![false], vec![false], vec![true], vec![true]],
    )
    .unwrap();
    let auc_worked = a.macro_auc == 0.75;

    let pass = mismatches == 0 && f1_worked && auc_worked;
    report(
        6,
        pass,
        format!("{mismatches} mismatches against oracles on 100 fixtures (exact), F1 2/3 fixture: {f1_worked}, AUC 0.75 fixture: {auc_worked}"),
    );
    assert!(pass);
}

// 7. Preprocessing exactness -------------------------------------------------

const B_SWEEP: [f64; 4] = [0.05, 0.1, 0.2, 0.3];

/// Recounts document frequencies from scratch and applies the removal rule.
fn oracle_filter(corpus: &[OemrDocument], doc: &OemrDocument, b: f64) -> Vec<Sentence> {
    let key = |s: &Sentence| normalize_tokens(&s.tokens);
    let kept: Vec<Sentence> = doc
        .sentences
        .iter()
        .filter(|s| {
            let k = key(s);
            let docs_with = corpus
                .iter()
                .filter(|d| d.sentences.iter().any(|t| key(t) == k))
                .count();
            let freq = docs_with as f64 / corpus.len() as f64;
            !(s.is_asymptomatic_template && freq > b)
        })
        .cloned()
        .collect();
    if kept.is_empty() {
        vec![needed::preprocess::empty_sentence()]
    } else {
        kept
    }
}

#[test]
fn criterion_7_preprocessing_exactness() {
    let corpus = generate_documents(&GenConfig {
        n_docs: 120,
        seed: 31,
        ..Default::default()
    })
    .unwrap();
    let table = FreqTable::build(&corpus).unwrap();
    let mut mismatches = 0;
    let mut surviving: Vec<BTreeSet<(usize, usize)>> = Vec::new();
    for b in B_SWEEP {
        let cfg = PreprocessConfig::with_threshold(b);
        let mut kept = BTreeSet::new();
        for (i, doc) in corpus.iter().enumerate() {
            let got = filter_asymptomatic(doc, &table, &cfg);
            if got.sentences != oracle_filter(&corpus, doc, b) {
                mismatches += 1;
            }
            for (j, s) in doc.sentences.iter().enumerate() {
                if got.sentences.contains(s) {
                    kept.insert((i, j));
                }
            }
        }
        surviving.push(kept);
    }
    let monotone = surviving.windows(2).all(|w| w[0].is_subset(&w[1]));
    let pass = mismatches == 0 && monotone;
    report(
        7,
        pass,
        format!(
            "{mismatches} documents differ from the oracle at B in {B_SWEEP:?}; surviving sets nested: {monotone} (sizes {:?})",
            surviving.iter().map(BTreeSet::len).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

// 9. Determinism and persistence ---------------------------------------------

#[test]
fn criterion_9_determinism_and_persistence() {
    let gen = GenConfig {
        n_docs: 80,
        seed: 41,
        ..Default::default()
    };
    let corpus = generate_documents(&gen).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        seed: 9,
        ..planted_config()
    };
    let a = run_experiment(
        AblationVariant::Full,
        &cfg,
        &corpus,
        &gen.disease_names(),
        continue_always,
    )
    .unwrap();
    let b = run_experiment(
        AblationVariant::Full,
        &cfg,
        &corpus,
        &gen.disease_names(),
        continue_always,
    )
    .unwrap();
    let curves_equal = a.history.losses() == b.history.losses();

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&a.checkpoint, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let bits_equal = a
        .checkpoint
        .params
        .store
        .iter()
        .zip(loaded.params.store.iter())
        .all(|((na, ta), (nb, tb))| {
            na == nb
                && ta
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(tb.data().iter().map(|v| v.to_bits()))
        });
    let test = prepare_data(AblationVariant::Full, &cfg, &corpus)
        .unwrap()
        .test;
    let metrics_equal = evaluate_split(&loaded, &test).unwrap() == a.report;

    let pass = curves_equal && bits_equal && metrics_equal;
    report(
        9,
        pass,
        format!("loss curves identical: {curves_equal} ({} epochs), checkpoint bit-identical: {bits_equal}, metrics preserved: {metrics_equal}", a.history.epochs.len()),
    );
    assert!(pass);
}
