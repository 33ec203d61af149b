//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use llmscreen::corpus::Label;
use llmscreen::decision::Decision;

/// Metrics computed straight from `(decision, label)` pairs, without a
/// confusion matrix, and F-beta in its count form
/// `(1+b²)TP / ((1+b²)TP + b²FN + FP)`.
#[derive(Debug, Clone, Copy)]
pub struct Reference {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub b_ac: f64,
    pub wss: f64,
    pub success: bool,
}

pub fn reference_metrics(pairs: &[(Decision, Label)], beta: f64, r: f64, target: f64) -> Reference {
    let n = pairs.len() as f64;
    let inc = |d: &Decision| *d == Decision::Include;
    let pos = |l: &Label| *l == Label::Included;
    let tp = pairs.iter().filter(|(d, l)| inc(d) && pos(l)).count() as f64;
    let predicted = pairs.iter().filter(|(d, _)| inc(d)).count() as f64;
    let relevant = pairs.iter().filter(|(_, l)| pos(l)).count() as f64;
    let negatives = n - relevant;
    let true_neg = pairs.iter().filter(|(d, l)| !inc(d) && !pos(l)).count() as f64;
    let excluded = n - predicted;

    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = tp / relevant;
    let fnn = relevant - tp;
    let fp = predicted - tp;
    let b2 = beta * beta;
    let denom = (1.0 + b2) * tp + b2 * fnn + fp;
    let f_beta = if tp == 0.0 { 0.0 } else { (1.0 + b2) * tp / denom };
    let tnr = if negatives > 0.0 { true_neg / negatives } else { 0.0 };
    Reference {
        precision,
        recall,
        f_beta,
        b_ac: (recall + tnr) / 2.0,
        wss: excluded / n - (1.0 - r),
        success: recall >= target,
    }
}

/// Decodes `code` (base 4, one digit per document) into decision/label
/// pairs.
pub fn decode(mut code: u32, n: usize) -> Vec<(Decision, Label)> {
    (0..n)
        .map(|_| {
            let digit = code % 4;
            code /= 4;
            let d = if digit & 1 == 1 {
                Decision::Include
            } else {
                Decision::Exclude
            };
            let l = if digit & 2 == 2 {
                Label::Included
            } else {
                Label::Excluded
            };
            (d, l)
        })
        .collect()
}

/// Recall of `include iff s >= theta` over `(score, included)` pairs.
pub fn recall_at(scores: &[(f64, bool)], theta: f64) -> f64 {
    let relevant = scores.iter().filter(|(_, inc)| *inc).count();
    let hit = scores.iter().filter(|(s, inc)| *inc && *s >= theta).count();
    hit as f64 / relevant as f64
}

/// Reference paired-t values, computed with `scipy.stats.ttest_rel`.
pub const T_REF_A: [f64; 10] = [0.72, 0.75, 0.71, 0.68, 0.80, 0.66, 0.74, 0.69, 0.77, 0.73];
pub const T_REF_B: [f64; 10] = [0.61, 0.59, 0.58, 0.62, 0.70, 0.64, 0.60, 0.57, 0.66, 0.63];
pub const T_REF_T: f64 = 8.28660485779334;
pub const T_REF_P: f64 = 1.6690748696202157e-05;
