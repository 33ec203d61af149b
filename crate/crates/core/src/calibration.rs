//! Choosing the decision threshold `theta` on normalized scores.
//!
//! For one topic, the recall-targeted threshold is the largest score that
//! still keeps at least a fraction `k` of the included documents. Across a
//! collection, the threshold for a target topic is the median of the other
//! topics' thresholds (leave-one-out). Seed studies can lower a threshold to
//! the lowest seed score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("topic has no included documents")]
    NoIncluded,
    #[error("target recall {0} outside (0, 1]")]
    BadTarget(f64),
    #[error("score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("extrapolation needs at least 2 topics, got {0}")]
    TooFewTopics(usize),
    #[error("unknown target topic {0}")]
    UnknownTopic(String),
    #[error("fixed calibration requires fixed_theta in [0, 1]")]
    MissingFixedTheta,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    #[default]
    Extrapolate,
    Seed,
    Fixed,
}

/// How the leave-one-out threshold is formed from the sample topics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtrapolationVariant {
    /// Median of the sample topics' own recall-targeted thresholds.
    #[default]
    PerTopicMedian,
    /// Median over the pooled scores of every included document that falls
    /// inside a sample topic's recall-achieving set.
    PooledMedian,
}

fn default_target() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    #[serde(default = "default_target")]
    pub target_recall: f64,
    #[serde(default)]
    pub mode: CalibrationMode,
    #[serde(default)]
    pub fixed_theta: Option<f64>,
    #[serde(default)]
    pub extrapolation_variant: ExtrapolationVariant,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            target_recall: default_target(),
            mode: CalibrationMode::default(),
            fixed_theta: None,
            extrapolation_variant: ExtrapolationVariant::default(),
        }
    }
}

impl CalibrationConfig {
    /// Target recall 0.95.
    pub fn k95() -> Self {
        Self::default()
    }

    /// Total recall.
    pub fn k100() -> Self {
        Self {
            target_recall: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        check_target(self.target_recall)?;
        match (self.mode, self.fixed_theta) {
            (CalibrationMode::Fixed, None) => Err(CalibrationError::MissingFixedTheta),
            (_, Some(t)) if !(0.0..=1.0).contains(&t) => Err(CalibrationError::MissingFixedTheta),
            _ => Ok(()),
        }
    }
}

/// A resolved threshold and everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub theta: f64,
    pub mode: CalibrationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<ExtrapolationVariant>,
    /// Thresholds of the sample topics the median was taken over.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_topic: BTreeMap<String, f64>,
    /// Threshold before seed adjustment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed_scores: Vec<f64>,
}

impl ThresholdPolicy {
    pub fn fixed(theta: f64) -> Self {
        Self {
            theta,
            mode: CalibrationMode::Fixed,
            target_recall: None,
            variant: None,
            per_topic: BTreeMap::new(),
            base_theta: None,
            seed_scores: Vec::new(),
        }
    }
}

/// A normalized score with its relevance label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelledScore {
    pub s_norm: f64,
    pub included: bool,
}

/// One calibration topic: its labelled, normalized candidate scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTopic {
    pub topic_id: String,
    pub scores: Vec<LabelledScore>,
}

fn check_target(k: f64) -> Result<(), CalibrationError> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(CalibrationError::BadTarget(k))
    }
}

/// Number of included documents needed for recall `>= k` out of `total`:
/// the smallest `n` with `n / total >= k`, i.e. `ceil(k * total)` computed
/// the same way recall is.
pub fn needed_for_recall(k: f64, total: usize) -> usize {
    let guess = ((k * total as f64).ceil() as usize).clamp(1, total);
    let meets = |n: usize| n as f64 / total as f64 >= k;
    let mut n = guess;
    while n > 1 && meets(n - 1) {
        n -= 1;
    }
    while n < total && !meets(n) {
        n += 1;
    }
    n
}

fn included_descending(scores: &[LabelledScore]) -> Result<Vec<f64>, CalibrationError> {
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(&s.s_norm)) {
        return Err(CalibrationError::OutOfRange(bad.s_norm));
    }
    let mut inc: Vec<f64> = scores.iter().filter(|s| s.included).map(|s| s.s_norm).collect();
    if inc.is_empty() {
        return Err(CalibrationError::NoIncluded);
    }
    inc.sort_by(|a, b| b.total_cmp(a));
    Ok(inc)
}

/// Largest threshold at which the topic still reaches recall `k`: the
/// `needed_for_recall(k, R)`-th highest included score.
pub fn per_topic_threshold(scores: &[LabelledScore], k: f64) -> Result<f64, CalibrationError> {
    check_target(k)?;
    let inc = included_descending(scores)?;
    Ok(inc[needed_for_recall(k, inc.len()) - 1])
}

/// Median; even counts average the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Per-topic thresholds for every topic, keyed by topic id.
pub fn per_topic_thresholds(topics: &[ScoredTopic], k: f64) -> Result<BTreeMap<String, f64>, CalibrationError> {
    topics
        .iter()
        .map(|t| Ok((t.topic_id.clone(), per_topic_threshold(&t.scores, k)?)))
        .collect()
}

/// Leave-one-out threshold for `target` from precomputed per-topic
/// thresholds. Only entries for other topics are read.
pub fn extrapolate_from_thresholds(
    thresholds: &BTreeMap<String, f64>,
    target: &str,
    k: f64,
) -> Result<ThresholdPolicy, CalibrationError> {
    if !thresholds.contains_key(target) {
        return Err(CalibrationError::UnknownTopic(target.to_string()));
    }
    if thresholds.len() < 2 {
        return Err(CalibrationError::TooFewTopics(thresholds.len()));
    }
    let sample: BTreeMap<String, f64> = thresholds
        .iter()
        .filter(|(id, _)| id.as_str() != target)
        .map(|(id, t)| (id.clone(), *t))
        .collect();
    let values: Vec<f64> = sample.values().copied().collect();
    Ok(ThresholdPolicy {
        theta: median(&values).expect("at least one sample topic"),
        mode: CalibrationMode::Extrapolate,
        target_recall: Some(k),
        variant: Some(ExtrapolationVariant::PerTopicMedian),
        per_topic: sample,
        base_theta: None,
        seed_scores: Vec::new(),
    })
}

/// Threshold for `target` fit on every other topic of the collection.
pub fn extrapolate_threshold(
    topics: &[ScoredTopic],
    target: &str,
    k: f64,
    variant: ExtrapolationVariant,
) -> Result<ThresholdPolicy, CalibrationError> {
    check_target(k)?;
    if topics.len() < 2 {
        return Err(CalibrationError::TooFewTopics(topics.len()));
    }
    if !topics.iter().any(|t| t.topic_id == target) {
        return Err(CalibrationError::UnknownTopic(target.to_string()));
    }
    let sample: Vec<&ScoredTopic> = topics.iter().filter(|t| t.topic_id != target).collect();
    let mut per_topic = BTreeMap::new();
    let mut pooled = Vec::new();
    for t in &sample {
        let inc = included_descending(&t.scores)?;
        let n = needed_for_recall(k, inc.len());
        per_topic.insert(t.topic_id.clone(), inc[n - 1]);
        pooled.extend_from_slice(&inc[..n]);
    }
    let theta = match variant {
        ExtrapolationVariant::PerTopicMedian => median(&per_topic.values().copied().collect::<Vec<_>>()),
        ExtrapolationVariant::PooledMedian => median(&pooled),
    }
    .expect("non-empty sample");
    Ok(ThresholdPolicy {
        theta,
        mode: CalibrationMode::Extrapolate,
        target_recall: Some(k),
        variant: Some(variant),
        per_topic,
        base_theta: None,
        seed_scores: Vec::new(),
    })
}

/// Lowers `theta` to the lowest seed score when a seed would otherwise be
/// excluded. Never raises the threshold.
pub fn seed_adjust(theta: f64, seed_scores: &[f64]) -> ThresholdPolicy {
    let lowest = seed_scores.iter().copied().fold(f64::INFINITY, f64::min);
    ThresholdPolicy {
        theta: theta.min(lowest),
        mode: CalibrationMode::Seed,
        target_recall: None,
        variant: None,
        per_topic: BTreeMap::new(),
        base_theta: Some(theta),
        seed_scores: seed_scores.to_vec(),
    }
}
