//! Accuracy, macro-F1, per-class average precision and minority mAP over the
//! eight scored classes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{Consensus, EmotionClass, NUM_CLASSES, NUM_SCORED};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} gold vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("class {0:?} is not scored")]
    OutOfRange(EmotionClass),
    #[error("nothing to score")]
    Empty,
}

fn check_pair(gold: &[EmotionClass], pred: &[EmotionClass]) -> Result<(), MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch(gold.len(), pred.len()));
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(c) = gold.iter().chain(pred).find(|c| !c.is_scored()) {
        return Err(MetricsError::OutOfRange(*c));
    }
    Ok(())
}

/// Counts indexed `[gold][pred]`.
pub fn confusion_matrix(gold: &[EmotionClass], pred: &[EmotionClass]) -> Result<[[u64; NUM_SCORED]; NUM_SCORED], MetricsError> {
    check_pair(gold, pred)?;
    let mut m = [[0u64; NUM_SCORED]; NUM_SCORED];
    for (g, p) in gold.iter().zip(pred) {
        m[g.index()][p.index()] += 1;
    }
    Ok(m)
}

/// Percentage of exact matches.
pub fn accuracy(gold: &[EmotionClass], pred: &[EmotionClass]) -> Result<f64, MetricsError> {
    check_pair(gold, pred)?;
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Breakdown {
    pub macro_f1: f64,
    pub precision: [f64; NUM_SCORED],
    pub recall: [f64; NUM_SCORED],
    pub f1: [f64; NUM_SCORED],
}

/// Unweighted mean of per-class F1. Any undefined ratio counts as 0, so a
/// class that is neither present nor predicted contributes 0.
pub fn macro_f1(gold: &[EmotionClass], pred: &[EmotionClass]) -> Result<F1Breakdown, MetricsError> {
    let m = confusion_matrix(gold, pred)?;
    let mut out = F1Breakdown { macro_f1: 0.0, precision: [0.0; NUM_SCORED], recall: [0.0; NUM_SCORED], f1: [0.0; NUM_SCORED] };
    for c in 0..NUM_SCORED {
        let tp = m[c][c] as f64;
        let predicted: u64 = (0..NUM_SCORED).map(|g| m[g][c]).sum();
        let actual: u64 = m[c].iter().sum();
        let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
        out.precision[c] = p;
        out.recall[c] = r;
        out.f1[c] = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    out.macro_f1 = out.f1.iter().sum::<f64>() / NUM_SCORED as f64;
    Ok(out)
}

/// AP of a ranking; `None` when there are no positives.
///
/// Samples are ranked by descending score with ties broken by ascending
/// index, and AP is the mean of precision@k over the ranks k of positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<Option<f64>, MetricsError> {
    if scores.len() != positives.len() {
        return Err(MetricsError::LengthMismatch(positives.len(), scores.len()));
    }
    let n_pos = positives.iter().filter(|p| **p).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / n_pos as f64))
}

/// AP of every scored class that has at least one positive, keyed by class.
pub fn per_class_ap(gold: &[EmotionClass], probs: &[[f64; NUM_CLASSES]]) -> Result<BTreeMap<EmotionClass, f64>, MetricsError> {
    if gold.len() != probs.len() {
        return Err(MetricsError::LengthMismatch(gold.len(), probs.len()));
    }
    let mut out = BTreeMap::new();
    for c in EmotionClass::ALL.into_iter().filter(|c| c.is_scored()) {
        let scores: Vec<f64> = probs.iter().map(|p| p[c.index()]).collect();
        let pos: Vec<bool> = gold.iter().map(|g| *g == c).collect();
        if let Some(ap) = average_precision(&scores, &pos)? {
            out.insert(c, ap);
        }
    }
    Ok(out)
}

/// Mean AP over the minority classes that have positives.
pub fn minority_map(gold: &[EmotionClass], probs: &[[f64; NUM_CLASSES]]) -> Result<Option<f64>, MetricsError> {
    let aps = per_class_ap(gold, probs)?;
    let vals: Vec<f64> = EmotionClass::MINORITY.iter().filter_map(|c| aps.get(c).copied()).collect();
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

/// Argmax over the scored classes; the first maximum wins.
pub fn predict_class(probs: &[f64; NUM_CLASSES]) -> EmotionClass {
    let mut best = 0;
    for c in 1..NUM_SCORED {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    EmotionClass::from_index(best).expect("scored index")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent.
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_precision: [f64; NUM_SCORED],
    pub per_class_recall: [f64; NUM_SCORED],
    pub per_class_f1: [f64; NUM_SCORED],
    pub per_class_ap: BTreeMap<String, f64>,
    pub minority_map: Option<f64>,
    /// `[gold][pred]`.
    pub confusion: [[u64; NUM_SCORED]; NUM_SCORED],
    pub n_scored: usize,
}

impl MetricsReport {
    /// Scores samples with a scored consensus; NoAgreement and "other" are skipped.
    pub fn score(consensus: &[Consensus], probs: &[[f64; NUM_CLASSES]]) -> Result<Self, MetricsError> {
        if consensus.len() != probs.len() {
            return Err(MetricsError::LengthMismatch(consensus.len(), probs.len()));
        }
        let (gold, probs): (Vec<EmotionClass>, Vec<[f64; NUM_CLASSES]>) = consensus
            .iter()
            .zip(probs)
            .filter_map(|(c, p)| c.scored_class().map(|g| (g, *p)))
            .unzip();
        Self::from_gold(&gold, &probs)
    }

    pub fn from_gold(gold: &[EmotionClass], probs: &[[f64; NUM_CLASSES]]) -> Result<Self, MetricsError> {
        if gold.len() != probs.len() {
            return Err(MetricsError::LengthMismatch(gold.len(), probs.len()));
        }
        let pred: Vec<EmotionClass> = probs.iter().map(predict_class).collect();
        let f1 = macro_f1(gold, &pred)?;
        let aps = per_class_ap(gold, probs)?;
        Ok(Self {
            accuracy: accuracy(gold, &pred)?,
            macro_f1: f1.macro_f1,
            per_class_precision: f1.precision,
            per_class_recall: f1.recall,
            per_class_f1: f1.f1,
            per_class_ap: aps.iter().map(|(c, v)| (c.name().to_string(), *v)).collect(),
            minority_map: minority_map(gold, probs)?,
            confusion: confusion_matrix(gold, &pred)?,
            n_scored: gold.len(),
        })
    }

    /// Confusion matrix with a header row and gold labels in the first column.
    pub fn confusion_csv(&self) -> String {
        let names: Vec<&str> = EmotionClass::ALL[..NUM_SCORED].iter().map(|c| c.name()).collect();
        let mut s = format!("gold\\pred,{}\n", names.join(","));
        for (g, row) in self.confusion.iter().enumerate() {
            s.push_str(names[g]);
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}
