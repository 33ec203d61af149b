//! Set-based screening metrics and paired significance testing.
//!
//! Per topic: precision, recall, F-beta (beta = 3 by default), balanced
//! accuracy, work saved over sampling at recall level `r`, and whether the
//! topic reached the target recall. Dataset numbers are unweighted means over
//! topics. Methods are compared with a two-tailed paired t-test over per-topic
//! values and Bonferroni-adjusted across the method pairs of one table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::corpus::Label;
use crate::decision::Decision;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no document has both a decision and a label")]
    NothingToEvaluate,
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("nothing to average")]
    Empty,
    #[error("unknown method {0}")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, decision: Decision, label: Label) {
        match (decision, label) {
            (Decision::Include, Label::Included) => self.tp += 1,
            (Decision::Include, Label::Excluded) => self.fp += 1,
            (Decision::Exclude, Label::Excluded) => self.tn += 1,
            (Decision::Exclude, Label::Included) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Decision, Label)>) -> Self {
        let mut cm = Self::default();
        for (d, l) in pairs {
            cm.add(d, l);
        }
        cm
    }
}

impl std::ops::AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Counts with the documents that had a decision but no label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub matrix: ConfusionMatrix,
    pub unlabelled: usize,
}

/// Tallies decisions against labels, skipping unlabelled documents.
pub fn confusion(
    decisions: &BTreeMap<String, Decision>,
    labels: &BTreeMap<String, Label>,
) -> Result<Confusion, EvalError> {
    let mut matrix = ConfusionMatrix::default();
    let mut unlabelled = 0;
    for (doc, d) in decisions {
        match labels.get(doc) {
            Some(l) => matrix.add(*d, *l),
            None => unlabelled += 1,
        }
    }
    if matrix.total() == 0 {
        return Err(EvalError::NothingToEvaluate);
    }
    Ok(Confusion { matrix, unlabelled })
}

/// Value of `TN / (TN + FP)` when a topic has no excluded documents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyRate {
    #[default]
    Zero,
    One,
}

fn default_beta() -> f64 {
    3.0
}
fn default_wss_recall() -> f64 {
    1.0
}
fn default_success() -> f64 {
    0.95
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Recall level `r` in WSS.
    #[serde(default = "default_wss_recall")]
    pub wss_recall: f64,
    /// A topic succeeds when its recall reaches this value.
    #[serde(default = "default_success")]
    pub success_target: f64,
    #[serde(default)]
    pub empty_negative_rate: EmptyRate,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            wss_recall: default_wss_recall(),
            success_target: default_success(),
            empty_negative_rate: EmptyRate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEvaluation {
    pub topic_id: String,
    pub confusion: ConfusionMatrix,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub b_ac: f64,
    pub wss: f64,
    pub success: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// All per-topic metrics from one confusion matrix. Requires at least one
/// included document (`tp + fn >= 1`).
pub fn metric_suite(topic_id: &str, cm: ConfusionMatrix, cfg: &MetricConfig) -> TopicEvaluation {
    debug_assert!(cm.tp + cm.fn_ >= 1, "topic without included documents");
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let b2 = cfg.beta * cfg.beta;
    let f_beta = if precision == 0.0 && recall == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / (b2 * precision + recall)
    };
    let tn_rate = if cm.tn + cm.fp == 0 {
        match cfg.empty_negative_rate {
            EmptyRate::Zero => 0.0,
            EmptyRate::One => 1.0,
        }
    } else {
        ratio(cm.tn, cm.tn + cm.fp)
    };
    let b_ac = 0.5 * (recall + tn_rate);
    let wss = ratio(cm.tn + cm.fn_, cm.total()) - (1.0 - cfg.wss_recall);
    TopicEvaluation {
        topic_id: topic_id.to_string(),
        confusion: cm,
        precision,
        recall,
        f_beta,
        b_ac,
        wss,
        success: recall >= cfg.success_target,
    }
}

/// One number per metric for a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvaluation {
    pub topics: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub b_ac: f64,
    pub wss: f64,
    pub success_rate: f64,
}

/// Unweighted mean over topics.
pub fn macro_average(evals: &[TopicEvaluation]) -> Result<DatasetEvaluation, EvalError> {
    if evals.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = evals.len() as f64;
    let mean = |f: fn(&TopicEvaluation) -> f64| evals.iter().map(f).sum::<f64>() / n;
    Ok(DatasetEvaluation {
        topics: evals.len(),
        precision: mean(|e| e.precision),
        recall: mean(|e| e.recall),
        f_beta: mean(|e| e.f_beta),
        b_ac: mean(|e| e.b_ac),
        wss: mean(|e| e.wss),
        success_rate: mean(|e| f64::from(u8::from(e.success))),
    })
}

/// Metrics of the pooled confusion matrix; success rate stays per topic.
pub fn micro_average(evals: &[TopicEvaluation], cfg: &MetricConfig) -> Result<DatasetEvaluation, EvalError> {
    let macro_ = macro_average(evals)?;
    let mut cm = ConfusionMatrix::default();
    for e in evals {
        cm += e.confusion;
    }
    let pooled = metric_suite("", cm, cfg);
    Ok(DatasetEvaluation {
        topics: evals.len(),
        precision: pooled.precision,
        recall: pooled.recall,
        f_beta: pooled.f_beta,
        b_ac: pooled.b_ac,
        wss: pooled.wss,
        success_rate: macro_.success_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
    /// Differences were constant and non-zero: `t` is infinite, `p` is 0.
    pub degenerate_variance: bool,
}

/// Two-tailed paired Student's t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs(n));
    }
    let df = (n - 1) as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&x| x == d[0]) {
        return Ok(if d[0] == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                df,
                degenerate_variance: false,
            }
        } else {
            TTest {
                t: f64::INFINITY.copysign(d[0]),
                p: 0.0,
                df,
                degenerate_variance: true,
            }
        });
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / df;
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        df,
        degenerate_variance: false,
    })
}

/// `min(1, p * m)` for each p-value.
pub fn bonferroni(p_values: &[f64], comparisons: usize) -> Vec<f64> {
    debug_assert!(comparisons >= p_values.len() || comparisons >= 1);
    p_values.iter().map(|p| (p * comparisons as f64).min(1.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "P")]
    Precision,
    #[serde(rename = "R")]
    Recall,
    #[serde(rename = "B-AC")]
    BalancedAccuracy,
    #[serde(rename = "F3")]
    FBeta,
    #[serde(rename = "Suc")]
    Success,
    #[serde(rename = "WSS")]
    Wss,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Precision,
        Metric::Recall,
        Metric::BalancedAccuracy,
        Metric::FBeta,
        Metric::Success,
        Metric::Wss,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Precision => "P",
            Metric::Recall => "R",
            Metric::BalancedAccuracy => "B-AC",
            Metric::FBeta => "F3",
            Metric::Success => "Suc",
            Metric::Wss => "WSS",
        }
    }

    pub fn topic_value(self, e: &TopicEvaluation) -> f64 {
        match self {
            Metric::Precision => e.precision,
            Metric::Recall => e.recall,
            Metric::BalancedAccuracy => e.b_ac,
            Metric::FBeta => e.f_beta,
            Metric::Success => f64::from(u8::from(e.success)),
            Metric::Wss => e.wss,
        }
    }

    pub fn dataset_value(self, e: &DatasetEvaluation) -> f64 {
        match self {
            Metric::Precision => e.precision,
            Metric::Recall => e.recall,
            Metric::BalancedAccuracy => e.b_ac,
            Metric::FBeta => e.f_beta,
            Metric::Success => e.success_rate,
            Metric::Wss => e.wss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTest {
    pub metric: Metric,
    pub t: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    pub degenerate_variance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub baseline: String,
    pub other: String,
    pub topics: usize,
    pub tests: Vec<MetricTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub alpha: f64,
    /// Bonferroni multiplier: the number of method pairs in the table.
    pub comparisons: usize,
    pub pairs: Vec<PairComparison>,
}

impl SignificanceReport {
    pub fn is_significant(&self, baseline: &str, other: &str, metric: Metric) -> bool {
        self.pairs
            .iter()
            .filter(|p| p.baseline == baseline && p.other == other)
            .flat_map(|p| &p.tests)
            .any(|t| t.metric == metric && t.significant)
    }
}

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Paired tests for each `(baseline, other)` pair over the topics both
/// methods evaluated, with Bonferroni adjustment by the number of pairs.
pub fn significance(
    evals: &BTreeMap<String, Vec<TopicEvaluation>>,
    pairs: &[(String, String)],
    alpha: f64,
) -> Result<SignificanceReport, EvalError> {
    let m = pairs.len();
    let mut out = Vec::with_capacity(m);
    for (base, other) in pairs {
        let a = evals.get(base).ok_or_else(|| EvalError::UnknownMethod(base.clone()))?;
        let b = evals
            .get(other)
            .ok_or_else(|| EvalError::UnknownMethod(other.clone()))?;
        let b_by_topic: BTreeMap<&str, &TopicEvaluation> = b.iter().map(|e| (e.topic_id.as_str(), e)).collect();
        let paired: Vec<(&TopicEvaluation, &TopicEvaluation)> = a
            .iter()
            .filter_map(|e| Some((e, *b_by_topic.get(e.topic_id.as_str())?)))
            .collect();
        let mut tests = Vec::new();
        for metric in Metric::ALL {
            let xs: Vec<f64> = paired.iter().map(|(x, _)| metric.topic_value(x)).collect();
            let ys: Vec<f64> = paired.iter().map(|(_, y)| metric.topic_value(y)).collect();
            let tt = paired_t_test(&xs, &ys)?;
            let p_adjusted = bonferroni(&[tt.p], m)[0];
            tests.push(MetricTest {
                metric,
                t: tt.t,
                p_raw: tt.p,
                p_adjusted,
                significant: p_adjusted < alpha,
                degenerate_variance: tt.degenerate_variance,
            });
        }
        out.push(PairComparison {
            baseline: base.clone(),
            other: other.clone(),
            topics: paired.len(),
            tests,
        });
    }
    Ok(SignificanceReport {
        alpha,
        comparisons: m,
        pairs: out,
    })
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub setting: String,
    pub evaluation: DatasetEvaluation,
}

/// CSV with columns `method,setting,topics,P,R,B-AC,F3,Suc,WSS`.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("method,setting,topics,P,R,B-AC,F3,Suc,WSS\n");
    for r in rows {
        let _ = write!(
            out,
            "{},{},{}",
            csv_field(&r.method),
            csv_field(&r.setting),
            r.evaluation.topics
        );
        for m in Metric::ALL {
            let _ = write!(out, ",{:.4}", m.dataset_value(&r.evaluation));
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Aligned plain-text table. Cells significantly different from the
/// baseline of `significance` are marked with `*`.
pub fn report_text(
    title: &str,
    notes: &[String],
    rows: &[ReportRow],
    significance: Option<&SignificanceReport>,
) -> String {
    let mut cells: Vec<Vec<String>> = vec![["Method", "Setting", "P", "R", "B-AC", "F3", "Suc", "WSS"]
        .iter()
        .map(|s| s.to_string())
        .collect()];
    for r in rows {
        let mut row = vec![r.method.clone(), r.setting.clone()];
        for m in Metric::ALL {
            let star = significance
                .map(|s| {
                    s.pairs
                        .iter()
                        .any(|p| p.other == row_key(r) && p.tests.iter().any(|t| t.metric == m && t.significant))
                })
                .unwrap_or(false);
            row.push(format!(
                "{:.2}{}",
                m.dataset_value(&r.evaluation),
                if star { "*" } else { "" }
            ));
        }
        cells.push(row);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "# {title}");
    for n in notes {
        let _ = writeln!(out, "# {n}");
    }
    if let Some(s) = significance {
        let _ = writeln!(
            out,
            "# * paired two-tailed t-test vs baseline, Bonferroni m={}, p < {}",
            s.comparisons, s.alpha
        );
    }
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                if c < 2 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

/// Key used to match table rows with significance pairs.
pub fn row_key(r: &ReportRow) -> String {
    format!("{}/{}", r.method, r.setting)
}
