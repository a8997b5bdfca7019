use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-label confusion counts at a fixed decision threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`; `None` when the label never occurs in either
    /// predictions or truths.
    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| (2 * self.tp) as f64 / denom as f64)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_label: Vec<Option<f64>>,
    pub counts: Vec<Counts>,
    /// Labels with `TP + FP + FN = 0`, left out of the macro average.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucScores {
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub per_label: Vec<Option<f64>>,
    /// Labels without both a positive and a negative instance.
    pub excluded: usize,
}

fn check_shape<A, B>(a: &[Vec<A>], b: &[Vec<B>]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "{} prediction rows for {} truth rows",
            a.len(),
            b.len()
        )));
    }
    let width = b.first().map_or(0, Vec::len);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != width || y.len() != width {
            return Err(Error::shape(format!(
                "row {i} has {} predictions and {} truths, expected {width}",
                x.len(),
                y.len()
            )));
        }
    }
    Ok(width)
}

/// Macro F1 averages labels that occur somewhere; when none do, every
/// prediction was a correct negative and the score is 1.
pub fn f1_scores(predictions: &[Vec<bool>], truths: &[Vec<bool>]) -> Result<F1Scores> {
    let width = check_shape(predictions, truths)?;
    let mut counts = vec![Counts::default(); width];
    for (p_row, t_row) in predictions.iter().zip(truths) {
        for (c, (&p, &t)) in counts.iter_mut().zip(p_row.iter().zip(t_row)) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    let per_label: Vec<Option<f64>> = counts.iter().map(Counts::f1).collect();
    let included: Vec<f64> = per_label.iter().flatten().copied().collect();
    let macro_f1 = if included.is_empty() {
        1.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    let pooled = counts.iter().fold(Counts::default(), |acc, c| Counts {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fn_: acc.fn_ + c.fn_,
        tn: acc.tn + c.tn,
    });
    Ok(F1Scores {
        macro_f1,
        micro_f1: pooled.f1().unwrap_or(1.0),
        excluded: width - included.len(),
        per_label,
        counts,
    })
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half. Computed from average ranks.
pub fn binary_auc(scores: &[f64], truths: &[bool]) -> Option<f64> {
    let positives = truths.iter().filter(|t| **t).count();
    let negatives = truths.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| {
        scores[*a]
            .partial_cmp(&scores[*b])
            .unwrap_or(Ordering::Equal)
    });
    // Twice the rank sum keeps tied half-ranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg_rank = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|k| truths[**k]).count() as u64;
        twice_rank_sum += twice_avg_rank * pos_in_group;
        i = j + 1;
    }
    let p = positives as u64;
    // 2U = 2 * rank_sum - P(P+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Some(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// Macro AUC over non-degenerate labels (0.5 when there are none); micro AUC
/// over all pooled (instance, label) pairs.
pub fn auc_scores(scores: &[Vec<f64>], truths: &[Vec<bool>]) -> Result<AucScores> {
    let width = check_shape(scores, truths)?;
    let per_label: Vec<Option<f64>> = (0..width)
        .map(|l| {
            let s: Vec<f64> = scores.iter().map(|r| r[l]).collect();
            let t: Vec<bool> = truths.iter().map(|r| r[l]).collect();
            binary_auc(&s, &t)
        })
        .collect();
    let included: Vec<f64> = per_label.iter().flatten().copied().collect();
    let macro_auc = if included.is_empty() {
        0.5
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_t: Vec<bool> = truths.iter().flatten().copied().collect();
    Ok(AucScores {
        macro_auc,
        micro_auc: binary_auc(&flat_s, &flat_t).unwrap_or(0.5),
        excluded: width - included.len(),
        per_label,
    })
}
