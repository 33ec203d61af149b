use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::decision::{Decision, DecisionRow, Setting};
use crate::evaluation::{
    confusion, macro_average, metric_suite, micro_average, report_csv, report_text, significance, EvalError,
    MetricConfig, ReportRow, SignificanceReport, TopicEvaluation,
};

/// Results for one setting: one row per source, plus significance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingTable {
    pub setting: Setting,
    pub rows: Vec<ReportRow>,
    pub micro: Vec<ReportRow>,
    /// Per-topic evaluations keyed by `source/setting`.
    pub per_topic: BTreeMap<String, Vec<TopicEvaluation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<SignificanceReport>,
    /// Why significance was not computed, if it was not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance_skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSet {
    pub notes: Vec<String>,
    pub metrics: MetricConfig,
    pub tables: Vec<SettingTable>,
    /// Decisions with no label, skipped from every count.
    pub unlabelled: usize,
}

fn key(source: &str, setting: Setting) -> String {
    format!("{source}/{setting}")
}

/// Groups decision rows by source, setting and topic and evaluates them.
/// Sources keep the order of their first appearance in `rows`.
pub fn evaluate_rows(
    rows: &[DecisionRow],
    labels: &LabelSet,
    metrics: &MetricConfig,
    pairs: &[[String; 2]],
    alpha: f64,
    notes: Vec<String>,
) -> Result<EvaluationSet, EvalError> {
    let mut sources: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<(Setting, String), BTreeMap<String, BTreeMap<String, Decision>>> = BTreeMap::new();
    let mut topic_order: Vec<String> = Vec::new();
    for r in rows {
        if !sources.iter().any(|s| s == r.source()) {
            sources.push(r.source().to_string());
        }
        if !topic_order.contains(&r.topic_id) {
            topic_order.push(r.topic_id.clone());
        }
        grouped
            .entry((r.setting, r.source().to_string()))
            .or_default()
            .entry(r.topic_id.clone())
            .or_default()
            .insert(r.doc_id.clone(), r.decision());
    }

    let empty = BTreeMap::new();
    let mut unlabelled = 0;
    let mut tables = Vec::new();
    for setting in [Setting::Uncalibrated, Setting::Calibrated] {
        let mut table = SettingTable {
            setting,
            rows: Vec::new(),
            micro: Vec::new(),
            per_topic: BTreeMap::new(),
            significance: None,
            significance_skipped: None,
        };
        for source in &sources {
            let Some(by_topic) = grouped.get(&(setting, source.clone())) else {
                continue;
            };
            let mut evals = Vec::new();
            for topic in &topic_order {
                let Some(decisions) = by_topic.get(topic) else {
                    continue;
                };
                let topic_labels = labels.topic(topic).unwrap_or(&empty);
                let c = confusion(decisions, topic_labels)?;
                unlabelled += c.unlabelled;
                if c.matrix.tp + c.matrix.fn_ == 0 {
                    log::warn!("{source}/{setting}: topic {topic} has no labelled included document");
                    continue;
                }
                evals.push(metric_suite(topic, c.matrix, metrics));
            }
            if evals.is_empty() {
                continue;
            }
            table.rows.push(ReportRow {
                method: source.clone(),
                setting: setting.to_string(),
                evaluation: macro_average(&evals)?,
            });
            table.micro.push(ReportRow {
                method: source.clone(),
                setting: setting.to_string(),
                evaluation: micro_average(&evals, metrics)?,
            });
            table.per_topic.insert(key(source, setting), evals);
        }
        if table.rows.is_empty() {
            continue;
        }

        let present: Vec<&str> = table.rows.iter().map(|r| r.method.as_str()).collect();
        let table_pairs: Vec<(String, String)> = if pairs.is_empty() {
            present[1..]
                .iter()
                .map(|o| (key(present[0], setting), key(o, setting)))
                .collect()
        } else {
            pairs
                .iter()
                .filter(|[a, b]| present.contains(&a.as_str()) && present.contains(&b.as_str()))
                .map(|[a, b]| (key(a, setting), key(b, setting)))
                .collect()
        };
        if table_pairs.is_empty() {
            table.significance_skipped = Some("no method pairs to compare".into());
        } else {
            match significance(&table.per_topic, &table_pairs, alpha) {
                Ok(s) => table.significance = Some(s),
                Err(e @ (EvalError::TooFewPairs(_) | EvalError::LengthMismatch(..))) => {
                    table.significance_skipped = Some(e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        tables.push(table);
    }
    Ok(EvaluationSet {
        notes,
        metrics: *metrics,
        tables,
        unlabelled,
    })
}

impl EvaluationSet {
    pub fn to_csv(&self) -> String {
        let rows: Vec<ReportRow> = self.tables.iter().flat_map(|t| t.rows.clone()).collect();
        report_csv(&rows)
    }

    /// One aligned table per setting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tables.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let mut notes = self.notes.clone();
            if let Some(why) = &t.significance_skipped {
                notes.push(format!("significance not computed: {why}"));
            }
            out.push_str(&report_text(
                &format!("{} (macro average)", t.setting),
                &notes,
                &t.rows,
                t.significance.as_ref(),
            ));
        }
        out
    }

    /// Significance reports by setting.
    pub fn significance_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, &SignificanceReport> = self
            .tables
            .iter()
            .filter_map(|t| Some((t.setting.to_string(), t.significance.as_ref()?)))
            .collect();
        serde_json::to_value(map).expect("serializable")
    }
}
