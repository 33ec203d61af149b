//! Include/exclude rules over yes/no likelihoods.
//!
//! * uncalibrated: include iff `p_yes >= p_no`;
//! * calibrated: include iff the per-topic min-max normalized margin
//!   `max(p_yes - p_no, 0)` is at least `theta`;
//! * CombSUM ensembles of either kind.
//!
//! Ties include everywhere. Calibrated fusion compares the *mean* of the
//! normalized scores against `theta`, which is the summed rule with `theta`
//! scaled by the number of methods, and keeps `theta` on the `[0, 1]` scale.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::ScoreRecord;

#[derive(Debug, Error, PartialEq)]
pub enum DecisionError {
    #[error("cannot normalize an empty score list")]
    EmptyTopic,
    #[error("non-finite or negative raw score {0}")]
    BadScore(f64),
    #[error("normalized score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("fusion needs at least {needed} inputs, got {got}")]
    TooFewMethods { needed: usize, got: usize },
    #[error("fusion inputs refer to different documents: {0}")]
    Mismatched(String),
    #[error("ensemble {0}: {1}")]
    Ensemble(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Include,
    Exclude,
}

impl Decision {
    pub fn from_include(include: bool) -> Self {
        if include {
            Decision::Include
        } else {
            Decision::Exclude
        }
    }

    pub fn is_include(self) -> bool {
        self == Decision::Include
    }
}

/// What the uncalibrated rule does when neither answer token was returned.
/// Taken literally, `0 >= 0` would include.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndeterminatePolicy {
    Include,
    #[default]
    Exclude,
}

pub fn decide_uncalibrated(record: &ScoreRecord, policy: IndeterminatePolicy) -> Decision {
    if record.indeterminate {
        log::debug!(
            "indeterminate record {}/{}/{}",
            record.method_id,
            record.topic_id,
            record.doc_id
        );
        return Decision::from_include(policy == IndeterminatePolicy::Include);
    }
    Decision::from_include(record.p_yes >= record.p_no)
}

/// `p_yes - p_no` when yes wins or ties, otherwise zero.
pub fn raw_margin(p_yes: f64, p_no: f64) -> f64 {
    if p_yes >= p_no {
        p_yes - p_no
    } else {
        0.0
    }
}

pub fn record_margin(record: &ScoreRecord) -> f64 {
    raw_margin(record.p_yes, record.p_no)
}

/// Min-max normalizes one topic's raw margins, preserving order. When every
/// score is equal the scorer cannot discriminate and all documents map to 1.
pub fn normalize_topic(scores: &[f64]) -> Result<Vec<f64>, DecisionError> {
    if scores.is_empty() {
        return Err(DecisionError::EmptyTopic);
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &s in scores {
        if !s.is_finite() || s < 0.0 {
            return Err(DecisionError::BadScore(s));
        }
        min = min.min(s);
        max = max.max(s);
    }
    if max == min {
        return Ok(vec![1.0; scores.len()]);
    }
    let range = max - min;
    Ok(scores.iter().map(|&s| ((s - min) / range).clamp(0.0, 1.0)).collect())
}

pub fn decide_calibrated(s_norm: f64, theta: f64) -> Decision {
    Decision::from_include(s_norm >= theta)
}

fn check_same_document(records: &[&ScoreRecord]) -> Result<(), DecisionError> {
    let first = records[0];
    if let Some(r) = records
        .iter()
        .find(|r| r.topic_id != first.topic_id || r.doc_id != first.doc_id)
    {
        return Err(DecisionError::Mismatched(format!(
            "{}/{} vs {}/{}",
            first.topic_id, first.doc_id, r.topic_id, r.doc_id
        )));
    }
    Ok(())
}

/// CombSUM over likelihoods with no minimum on the number of methods. With
/// one record this is exactly [`decide_uncalibrated`].
pub fn combsum_likelihoods(records: &[&ScoreRecord], policy: IndeterminatePolicy) -> Result<Decision, DecisionError> {
    if records.is_empty() {
        return Err(DecisionError::TooFewMethods { needed: 1, got: 0 });
    }
    check_same_document(records)?;
    if records.iter().all(|r| r.indeterminate) {
        return Ok(Decision::from_include(policy == IndeterminatePolicy::Include));
    }
    let yes = order_free_sum(records.iter().map(|r| r.p_yes));
    let no = order_free_sum(records.iter().map(|r| r.p_no));
    Ok(Decision::from_include(yes >= no))
}

/// Uncalibrated ensemble: include iff the summed yes likelihoods reach the
/// summed no likelihoods.
pub fn fuse_uncalibrated(records: &[&ScoreRecord], policy: IndeterminatePolicy) -> Result<Decision, DecisionError> {
    if records.len() < 2 {
        return Err(DecisionError::TooFewMethods {
            needed: 2,
            got: records.len(),
        });
    }
    combsum_likelihoods(records, policy)
}

/// Sums in ascending order so the result does not depend on method order.
fn order_free_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Mean of per-method normalized scores; stays in `[0, 1]`.
pub fn fused_score(s_norms: &[f64]) -> f64 {
    order_free_sum(s_norms.iter().copied()) / s_norms.len() as f64
}

pub fn fuse_calibrated(s_norms: &[f64], theta: f64) -> Result<Decision, DecisionError> {
    if s_norms.len() < 2 {
        return Err(DecisionError::TooFewMethods {
            needed: 2,
            got: s_norms.len(),
        });
    }
    if let Some(&bad) = s_norms.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(DecisionError::OutOfRange(bad));
    }
    Ok(decide_calibrated(fused_score(s_norms), theta))
}

/// A named set of score sources fused with CombSUM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub id: String,
    pub method_ids: Vec<String>,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), DecisionError> {
        if self.method_ids.len() < 2 {
            return Err(DecisionError::Ensemble(
                self.id.clone(),
                "needs at least two methods".into(),
            ));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.method_ids.iter().find(|m| !seen.insert(*m)) {
            return Err(DecisionError::Ensemble(
                self.id.clone(),
                format!("duplicate method {dup}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScore {
    pub topic_id: String,
    pub doc_id: String,
    pub method_id: String,
    pub s_raw: f64,
    pub s_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Uncalibrated,
    Calibrated,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::Uncalibrated => "uncalibrated",
            Setting::Calibrated => "calibrated",
        })
    }
}

/// One line of the decisions export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub topic_id: String,
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_id: Option<String>,
    pub setting: Setting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    pub include: bool,
}

impl DecisionRow {
    /// The method or ensemble that produced the row.
    pub fn source(&self) -> &str {
        self.method_id
            .as_deref()
            .or(self.ensemble_id.as_deref())
            .unwrap_or_default()
    }

    pub fn decision(&self) -> Decision {
        Decision::from_include(self.include)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(p_yes: f64, p_no: f64) -> ScoreRecord {
        ScoreRecord {
            method_id: "m".into(),
            topic_id: "t".into(),
            doc_id: "d".into(),
            p_yes,
            p_no,
            indeterminate: p_yes == 0.0 && p_no == 0.0,
            prompt_hash: String::new(),
        }
    }

    const EXCL: IndeterminatePolicy = IndeterminatePolicy::Exclude;

    #[test]
    fn uncalibrated_rule() {
        assert_eq!(decide_uncalibrated(&rec(0.6, 0.3), EXCL), Decision::Include);
        assert_eq!(decide_uncalibrated(&rec(0.3, 0.3), EXCL), Decision::Include);
        assert_eq!(decide_uncalibrated(&rec(0.1, 0.7), EXCL), Decision::Exclude);
    }

    #[test]
    fn indeterminate_policy() {
        let r = rec(0.0, 0.0);
        assert_eq!(decide_uncalibrated(&r, EXCL), Decision::Exclude);
        assert_eq!(decide_uncalibrated(&r, IndeterminatePolicy::Include), Decision::Include);
    }

    #[test]
    fn margins() {
        assert!((raw_margin(0.6, 0.3) - 0.3).abs() < 1e-15);
        assert_eq!(raw_margin(0.3, 0.6), 0.0);
        assert_eq!(raw_margin(0.5, 0.5), 0.0);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_topic(&[0.0, 0.2, 0.4]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_topic(&[0.3, 0.3]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(normalize_topic(&[1.0, 3.0, 5.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_topic(&[]), Err(DecisionError::EmptyTopic));
        assert!(normalize_topic(&[f64::NAN]).is_err());
    }

    #[test]
    fn calibrated_rule() {
        assert_eq!(decide_calibrated(0.5, 0.4), Decision::Include);
        assert_eq!(decide_calibrated(0.4, 0.4), Decision::Include);
        assert_eq!(decide_calibrated(0.39, 0.4), Decision::Exclude);
    }

    #[test]
    fn uncalibrated_fusion() {
        let (a, b) = (rec(0.6, 0.3), rec(0.2, 0.7));
        assert_eq!(fuse_uncalibrated(&[&a, &b], EXCL).unwrap(), Decision::Exclude);
        let h = rec(0.5, 0.5);
        assert_eq!(fuse_uncalibrated(&[&h, &h], EXCL).unwrap(), Decision::Include);
        assert!(matches!(
            fuse_uncalibrated(&[&a], EXCL),
            Err(DecisionError::TooFewMethods { .. })
        ));
        let mut other = rec(0.1, 0.1);
        other.doc_id = "x".into();
        assert!(matches!(
            fuse_uncalibrated(&[&a, &other], EXCL),
            Err(DecisionError::Mismatched(_))
        ));
    }

    #[test]
    fn calibrated_fusion() {
        assert_eq!(fuse_calibrated(&[0.9, 0.3], 0.5).unwrap(), Decision::Include);
        assert_eq!(fuse_calibrated(&[0.0, 0.0], 0.0).unwrap(), Decision::Include);
        assert_eq!(fuse_calibrated(&[0.2, 0.2], 0.5).unwrap(), Decision::Exclude);
        assert!(fuse_calibrated(&[1.2, 0.2], 0.5).is_err());
    }

    #[test]
    fn ensemble_config_validation() {
        let ok = EnsembleConfig {
            id: "e".into(),
            method_ids: vec!["a".into(), "b".into()],
        };
        assert!(ok.validate().is_ok());
        let dup = EnsembleConfig {
            id: "e".into(),
            method_ids: vec!["a".into(), "a".into()],
        };
        assert!(dup.validate().is_err());
        let single = EnsembleConfig {
            id: "e".into(),
            method_ids: vec!["a".into()],
        };
        assert!(single.validate().is_err());
    }

    fn prob_pair() -> impl Strategy<Value = (f64, f64)> {
        (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| (a * 0.5, b * 0.5))
    }

    proptest! {
        #[test]
        fn single_record_combsum_matches_uncalibrated((y, n) in prob_pair()) {
            let r = rec(y, n);
            prop_assert_eq!(combsum_likelihoods(&[&r], EXCL).unwrap(), decide_uncalibrated(&r, EXCL));
        }

        #[test]
        fn include_iff_positive_margin_or_tie((y, n) in prob_pair()) {
            prop_assume!(!(y == 0.0 && n == 0.0));
            let r = rec(y, n);
            let include = decide_uncalibrated(&r, EXCL).is_include();
            prop_assert_eq!(include, record_margin(&r) > 0.0 || y == n);
        }

        #[test]
        fn normalized_in_unit_interval_with_endpoints(scores in proptest::collection::vec(0.0f64..10.0, 1..50)) {
            let n = normalize_topic(&scores).unwrap();
            prop_assert_eq!(n.len(), scores.len());
            prop_assert!(n.iter().all(|s| (0.0..=1.0).contains(s)));
            let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max > min {
                prop_assert!(n.contains(&0.0));
                prop_assert!(n.contains(&1.0));
            }
        }

        #[test]
        fn affine_invariance(
            inner in proptest::collection::vec(0.0f64..1.0, 0..40),
            a in 0.1f64..10.0,
            b in 0.0f64..1.0,
        ) {
            let mut scores = vec![0.0, 1.0];
            scores.extend(inner);
            let base = normalize_topic(&scores).unwrap();
            let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let shifted = normalize_topic(&moved).unwrap();
            for (x, y) in base.iter().zip(&shifted) {
                prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }

        #[test]
        fn threshold_monotone(s in proptest::collection::vec(0.0f64..=1.0, 1..40), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            for x in &s {
                if decide_calibrated(*x, hi).is_include() {
                    prop_assert!(decide_calibrated(*x, lo).is_include());
                }
                prop_assert!(decide_calibrated(*x, 0.0).is_include());
            }
        }

        #[test]
        fn fusion_ignores_method_order(
            pairs in proptest::collection::vec(prob_pair(), 2..6),
            norms in proptest::collection::vec(0.0f64..=1.0, 2..6),
            theta in 0.0f64..=1.0,
            rot in 0usize..6,
        ) {
            let recs: Vec<ScoreRecord> = pairs.iter().map(|(y, n)| rec(*y, *n)).collect();
            let mut refs: Vec<&ScoreRecord> = recs.iter().collect();
            let before = fuse_uncalibrated(&refs, EXCL).unwrap();
            refs.reverse();
            let k = rot % refs.len();
            refs.rotate_left(k);
            prop_assert_eq!(before, fuse_uncalibrated(&refs, EXCL).unwrap());

            let mut ns = norms.clone();
            let before = fuse_calibrated(&ns, theta).unwrap();
            ns.sort_by(f64::total_cmp);
            prop_assert_eq!(before, fuse_calibrated(&ns, theta).unwrap());
        }
    }
}
