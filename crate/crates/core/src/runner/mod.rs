//! End-to-end experiments from one [`ExperimentConfig`]: score every
//! candidate with every backend (through the score cache), normalize per
//! topic, fit thresholds, decide, and optionally evaluate.
//!
//! Scoring always goes through the cache, so once a run has scored a dataset
//! every later calibration, ensemble or report replays from disk.

mod config;
mod tables;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{DataConfig, ExperimentConfig, SeparationPreset, SeparationSpec, SignificanceConfig, SyntheticConfig};
pub use tables::{evaluate_rows, EvaluationSet, SettingTable};

use crate::calibration::{
    extrapolate_from_thresholds, extrapolate_threshold, per_topic_thresholds, seed_adjust, CalibrationError,
    CalibrationMode, ExtrapolationVariant, LabelledScore, ScoredTopic, ThresholdPolicy,
};
use crate::corpus::{AssemblyReport, Candidate, CorpusError, Dataset, Label, LabelSet};
use crate::decision::{
    combsum_likelihoods, decide_calibrated, decide_uncalibrated, fused_score, normalize_topic, record_margin, Decision,
    DecisionRow, IndeterminatePolicy, Setting,
};
use crate::evaluation::EvalError;
use crate::scoring::{
    AnswerVariants, Backend, BackendError, BackendKind, BackendProfile, OpenAiCompletions, ScoreCache, ScoreRecord,
    ScoreRequest, Scorer, ScoringError, SyntheticBackend, SyntheticGenerator, TokenDistribution,
};

pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const SIGNIFICANCE_FILE: &str = "significance.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("evaluation: {0}")]
    Evaluation(#[from] EvalError),
}

impl RunError {
    /// Process exit code: 2 config, 3 data, 4 scoring, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Data(_) => 3,
            RunError::Scoring(_) => 4,
            RunError::Io { .. } | RunError::Evaluation(_) => 1,
        }
    }
}

impl From<CorpusError> for RunError {
    fn from(e: CorpusError) -> Self {
        RunError::Data(e.to_string())
    }
}

impl From<CalibrationError> for RunError {
    fn from(e: CalibrationError) -> Self {
        RunError::Data(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which outputs a run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Fill the score cache only.
    Score,
    /// Scores and thresholds.
    Calibrate,
    /// Decisions for every backend and ensemble.
    Screen,
    /// Decisions for ensembles only.
    Ensemble,
    /// Leave-one-out calibration, decisions, evaluation and significance.
    Loo,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Never call a backend; every score must come from the cache.
    pub offline: bool,
    /// Overrides the config's seed.
    pub seed: Option<u64>,
}

/// Hard counters for everything a run skipped, clipped or defaulted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warnings {
    pub truncated_prompts: usize,
    pub indeterminate_records: usize,
    /// Documents that failed scoring within the tolerance; decided as
    /// indeterminate.
    pub failed_documents: usize,
    pub retries: u64,
    pub unlabelled_decisions: usize,
    pub removed_topics: usize,
    pub dropped_candidates: usize,
    pub dropped_labels: usize,
    pub overwritten_labels: usize,
    pub dropped_seeds: usize,
    pub cache_skipped_lines: usize,
    /// Topic/source pairs whose margins were all equal (all scores 1.0).
    pub degenerate_normalizations: usize,
    /// Topics without seeds in seed calibration (threshold left at base).
    pub topics_without_seeds: usize,
}

/// Settings that change results without being obvious from the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSettings {
    pub degenerate_normalization: String,
    pub indeterminate_policy: IndeterminatePolicy,
    pub calibrated_fusion: String,
    pub ties: String,
    pub answer_variants: BTreeMap<String, AnswerVariants>,
    pub calibration_mode: CalibrationMode,
    pub extrapolation_variant: ExtrapolationVariant,
    pub target_recall: f64,
    pub seed_normalization: String,
    pub seed_base_theta: Option<f64>,
    pub averaging: String,
    pub failed_documents: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub topics: usize,
    pub candidates: usize,
    pub score_records: usize,
    pub cache_hits: usize,
    pub decisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: String,
    pub version: String,
    pub stage: Stage,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    pub offline: bool,
    pub config: ExperimentConfig,
    pub effective: EffectiveSettings,
    pub timings_ms: BTreeMap<String, u64>,
    pub warnings: Warnings,
    pub counts: Counts,
    pub outputs: Vec<String>,
}

pub type Thresholds = BTreeMap<String, BTreeMap<String, ThresholdPolicy>>;

/// In-memory results of a run. The same data is written to the output
/// directory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub decisions: Vec<DecisionRow>,
    pub thresholds: Thresholds,
    pub evaluation: Option<EvaluationSet>,
}

/// Scores of one method: topic -> doc -> record.
#[derive(Debug, Clone, Default)]
pub struct MethodScores {
    pub candidates: BTreeMap<String, BTreeMap<String, ScoreRecord>>,
    /// Non-retrieved seed studies, scored only for seed calibration.
    pub seeds: BTreeMap<String, BTreeMap<String, ScoreRecord>>,
}

/// A loaded dataset plus the shared score cache.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub assembly: AssemblyReport,
    pub cache: ScoreCache,
    pub options: RunOptions,
}

/// Stands in for a network backend when running offline.
struct Unreachable(String);

impl Backend for Unreachable {
    fn method_id(&self) -> &str {
        &self.0
    }

    fn next_token(&self, _: &ScoreRequest<'_>) -> Result<TokenDistribution, BackendError> {
        Err(BackendError::Protocol("backend disabled while offline".into()))
    }
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("slot filled"))
        .collect()
}

fn indeterminate(method: &str, topic: &str, doc: &str) -> ScoreRecord {
    ScoreRecord {
        method_id: method.to_string(),
        topic_id: topic.to_string(),
        doc_id: doc.to_string(),
        p_yes: 0.0,
        p_no: 0.0,
        indeterminate: true,
        prompt_hash: String::new(),
    }
}

#[derive(Default)]
struct ScoreStats {
    truncated: usize,
    indeterminate: usize,
    failed: usize,
    retries: u64,
    cache_hits: usize,
    records: usize,
}

impl Experiment {
    pub fn open(mut config: ExperimentConfig, options: RunOptions) -> Result<Self, RunError> {
        if let Some(seed) = options.seed {
            config.seed = seed;
        }
        config.validate()?;
        let (dataset, assembly) = Dataset::load_canonical(&config.data.dir)?;
        let cache_path = config.cache_path();
        let cache = ScoreCache::open(&cache_path).map_err(io_err(&cache_path))?;
        Ok(Self {
            config,
            dataset,
            assembly,
            cache,
            options,
        })
    }

    fn needs_seeds(&self) -> bool {
        self.config.calibration.mode == CalibrationMode::Seed
    }

    fn synthetic_labels(&self) -> LabelSet {
        let mut labels = self.dataset.labels().clone();
        if let Some(seeds) = self.dataset.seeds() {
            for (topic, list) in &seeds.by_topic {
                for s in list {
                    if labels.get(topic, &s.doc_id).is_none() {
                        labels.insert(topic, &s.doc_id, Label::Included);
                    }
                }
            }
        }
        labels
    }

    fn backend_for(&self, profile: &BackendProfile) -> Result<Option<Box<dyn Backend>>, RunError> {
        Ok(match profile.kind {
            BackendKind::Cache => None,
            BackendKind::Synthetic => {
                let mut g = SyntheticGenerator::new(&profile.name, self.config.seed);
                if self.config.synthetic.planted {
                    g = g.planted(self.synthetic_labels(), self.config.synthetic.separation.resolve());
                }
                Some(Box::new(SyntheticBackend::new(g)))
            }
            BackendKind::Openai if self.options.offline => Some(Box::new(Unreachable(profile.name.clone()))),
            BackendKind::Openai => Some(Box::new(
                OpenAiCompletions::from_profile(profile).map_err(RunError::Config)?,
            )),
        })
    }

    /// Scores every candidate (and, for seed calibration, every
    /// non-retrieved seed) with every backend.
    fn score_all(
        &self,
        warnings: &mut Warnings,
        counts: &mut Counts,
    ) -> Result<BTreeMap<String, MethodScores>, RunError> {
        let registry = self.config.template_registry()?;
        let mut all = BTreeMap::new();
        let mut stats = ScoreStats::default();
        for profile in &self.config.backends {
            let backend = self.backend_for(profile)?;
            let template = registry
                .get(&profile.template)
                .map_err(|e| RunError::Config(e.to_string()))?;
            let topics = self.dataset.topics();
            type TopicResult =
                Result<(BTreeMap<String, ScoreRecord>, BTreeMap<String, ScoreRecord>, ScoreStats), RunError>;
            let results: Vec<TopicResult> = parallel_map(topics, self.config.workers, |topic| {
                let cands = self.dataset.candidates(&topic.topic_id);
                let seeds: Vec<Candidate> = if self.needs_seeds() {
                    self.dataset
                        .seeds()
                        .map(|s| s.topic(&topic.topic_id))
                        .unwrap_or_default()
                        .iter()
                        .filter(|s| s.non_retrieved)
                        .filter_map(|s| s.as_candidate())
                        .collect()
                } else {
                    Vec::new()
                };
                let mut st = ScoreStats::default();
                let mut score = |docs: &[Candidate]| -> Result<BTreeMap<String, ScoreRecord>, RunError> {
                    let mut out = BTreeMap::new();
                    if docs.is_empty() {
                        return Ok(out);
                    }
                    match &backend {
                        None => {
                            for c in docs {
                                let rec = self
                                    .cache
                                    .latest(&profile.name, &topic.topic_id, &c.doc_id)
                                    .ok_or_else(|| ScoringError::Offline {
                                        topic_id: topic.topic_id.clone(),
                                        doc_id: c.doc_id.clone(),
                                    })?;
                                st.cache_hits += 1;
                                st.indeterminate += usize::from(rec.indeterminate);
                                out.insert(c.doc_id.clone(), rec);
                            }
                        }
                        Some(b) => {
                            let scorer =
                                Scorer::from_profile(b.as_ref(), &self.cache, profile).offline(self.options.offline);
                            let ts = scorer.score_topic(topic, docs, template, profile.budget)?;
                            st.truncated += ts.truncated;
                            st.indeterminate += ts.indeterminate;
                            st.retries += u64::from(ts.retries);
                            st.cache_hits += ts.cache_hits;
                            st.failed += ts.failures.len();
                            for (doc, err) in &ts.failures {
                                log::warn!("{}: {}/{doc} failed: {err}", profile.name, topic.topic_id);
                            }
                            for r in ts.records {
                                out.insert(r.doc_id.clone(), r);
                            }
                        }
                    }
                    st.records += out.len();
                    Ok(out)
                };
                let c = score(cands)?;
                let s = score(&seeds)?;
                Ok((c, s, st))
            });
            let mut ms = MethodScores::default();
            for (topic, r) in topics.iter().zip(results) {
                let (c, s, st) = r?;
                stats.truncated += st.truncated;
                stats.indeterminate += st.indeterminate;
                stats.failed += st.failed;
                stats.retries += st.retries;
                stats.cache_hits += st.cache_hits;
                stats.records += st.records;
                ms.candidates.insert(topic.topic_id.clone(), c);
                ms.seeds.insert(topic.topic_id.clone(), s);
            }
            all.insert(profile.name.clone(), ms);
        }
        warnings.truncated_prompts = stats.truncated;
        warnings.indeterminate_records = stats.indeterminate;
        warnings.failed_documents = stats.failed;
        warnings.retries = stats.retries;
        counts.cache_hits = stats.cache_hits;
        counts.score_records = stats.records;
        Ok(all)
    }
}

/// One source's view of one topic, aligned with the topic's candidates.
#[derive(Debug, Clone)]
struct SourceTopic {
    uncalibrated: Vec<Decision>,
    s_norm: Vec<f64>,
    /// Normalized seed scores, keyed by seed doc id.
    seeds: BTreeMap<String, f64>,
    degenerate: bool,
}

struct Source {
    id: String,
    ensemble: bool,
    topics: Vec<SourceTopic>,
}

fn method_source(
    name: &str,
    scores: &MethodScores,
    dataset: &Dataset,
    policy: IndeterminatePolicy,
    with_seeds: bool,
) -> Result<(Source, Vec<Vec<ScoreRecord>>), RunError> {
    let mut topics = Vec::new();
    let mut records_by_topic = Vec::new();
    let empty = BTreeMap::new();
    for topic in dataset.topics() {
        let tid = &topic.topic_id;
        let cand_scores = scores.candidates.get(tid).unwrap_or(&empty);
        let records: Vec<ScoreRecord> = dataset
            .candidates(tid)
            .iter()
            .map(|c| {
                cand_scores
                    .get(&c.doc_id)
                    .cloned()
                    .unwrap_or_else(|| indeterminate(name, tid, &c.doc_id))
            })
            .collect();
        let uncalibrated = records.iter().map(|r| decide_uncalibrated(r, policy)).collect();
        let mut margins: Vec<f64> = records.iter().map(record_margin).collect();
        let n = margins.len();
        // Non-retrieved seeds join the pool for min/max, then leave it.
        let extra: Vec<(&String, &ScoreRecord)> = if with_seeds {
            scores.seeds.get(tid).map(|m| m.iter().collect()).unwrap_or_default()
        } else {
            Vec::new()
        };
        margins.extend(extra.iter().map(|(_, r)| record_margin(r)));
        let degenerate = margins.iter().all(|&m| m == margins[0]);
        let mut norm = normalize_topic(&margins).map_err(|e| RunError::Data(format!("{tid}: {e}")))?;
        let seed_tail = norm.split_off(n);
        let mut seeds: BTreeMap<String, f64> = extra.iter().map(|(d, _)| (*d).clone()).zip(seed_tail).collect();
        if with_seeds {
            if let Some(set) = dataset.seeds() {
                for s in set.topic(tid).iter().filter(|s| !s.non_retrieved) {
                    if let Some(i) = dataset.candidates(tid).iter().position(|c| c.doc_id == s.doc_id) {
                        seeds.insert(s.doc_id.clone(), norm[i]);
                    }
                }
            }
        }
        topics.push(SourceTopic {
            uncalibrated,
            s_norm: norm,
            seeds,
            degenerate,
        });
        records_by_topic.push(records);
    }
    Ok((
        Source {
            id: name.to_string(),
            ensemble: false,
            topics,
        },
        records_by_topic,
    ))
}

fn ensemble_source(
    id: &str,
    members: &[(&Source, &Vec<Vec<ScoreRecord>>)],
    policy: IndeterminatePolicy,
) -> Result<Source, RunError> {
    let n_topics = members[0].0.topics.len();
    let mut topics = Vec::with_capacity(n_topics);
    for t in 0..n_topics {
        let n_docs = members[0].1[t].len();
        let mut uncalibrated = Vec::with_capacity(n_docs);
        let mut s_norm = Vec::with_capacity(n_docs);
        for d in 0..n_docs {
            let recs: Vec<&ScoreRecord> = members.iter().map(|(_, r)| &r[t][d]).collect();
            uncalibrated.push(combsum_likelihoods(&recs, policy).map_err(|e| RunError::Data(e.to_string()))?);
            let norms: Vec<f64> = members.iter().map(|(s, _)| s.topics[t].s_norm[d]).collect();
            s_norm.push(fused_score(&norms));
        }
        let mut seeds = BTreeMap::new();
        for doc in members[0].0.topics[t].seeds.keys() {
            let norms: Option<Vec<f64>> = members
                .iter()
                .map(|(s, _)| s.topics[t].seeds.get(doc).copied())
                .collect();
            if let Some(norms) = norms {
                seeds.insert(doc.clone(), fused_score(&norms));
            }
        }
        topics.push(SourceTopic {
            uncalibrated,
            s_norm,
            seeds,
            degenerate: members.iter().all(|(s, _)| s.topics[t].degenerate),
        });
    }
    Ok(Source {
        id: id.to_string(),
        ensemble: true,
        topics,
    })
}

/// Thresholds for each topic of one source, in dataset topic order.
fn calibrate_source(
    exp: &Experiment,
    source: &Source,
    warnings: &mut Warnings,
) -> Result<Vec<ThresholdPolicy>, RunError> {
    let cal = &exp.config.calibration;
    let topics = exp.dataset.topics();
    match cal.mode {
        CalibrationMode::Fixed => Ok(vec![
            ThresholdPolicy::fixed(cal.fixed_theta.expect("validated"));
            topics.len()
        ]),
        CalibrationMode::Seed => {
            if exp
                .dataset
                .seeds()
                .is_none_or(|s| s.by_topic.values().all(Vec::is_empty))
            {
                return Err(RunError::Data("seed calibration requires a seed set".into()));
            }
            let base = cal.fixed_theta.unwrap_or(1.0);
            Ok(source
                .topics
                .iter()
                .map(|st| {
                    if st.seeds.is_empty() {
                        warnings.topics_without_seeds += 1;
                    }
                    let scores: Vec<f64> = st.seeds.values().copied().collect();
                    seed_adjust(base, &scores)
                })
                .collect())
        }
        CalibrationMode::Extrapolate => {
            if topics.len() < 2 {
                return Err(CalibrationError::TooFewTopics(topics.len()).into());
            }
            let scored: Vec<ScoredTopic> = topics
                .iter()
                .zip(&source.topics)
                .map(|(t, st)| ScoredTopic {
                    topic_id: t.topic_id.clone(),
                    scores: exp
                        .dataset
                        .candidates(&t.topic_id)
                        .iter()
                        .zip(&st.s_norm)
                        .map(|(c, &s)| LabelledScore {
                            s_norm: s,
                            included: exp.dataset.label(&t.topic_id, &c.doc_id) == Some(Label::Included),
                        })
                        .collect(),
                })
                .collect();
            let k = cal.target_recall;
            match cal.extrapolation_variant {
                ExtrapolationVariant::PerTopicMedian => {
                    let own = per_topic_thresholds(&scored, k)?;
                    topics
                        .iter()
                        .map(|t| Ok(extrapolate_from_thresholds(&own, &t.topic_id, k)?))
                        .collect()
                }
                variant => topics
                    .iter()
                    .map(|t| Ok(extrapolate_threshold(&scored, &t.topic_id, k, variant)?))
                    .collect(),
            }
        }
    }
}

fn decision_rows(exp: &Experiment, source: &Source, thresholds: Option<&[ThresholdPolicy]>) -> Vec<DecisionRow> {
    let mut rows = Vec::new();
    let (method_id, ensemble_id) = if source.ensemble {
        (None, Some(source.id.clone()))
    } else {
        (Some(source.id.clone()), None)
    };
    let mk = |topic: &str, doc: &str, setting, s_norm, theta, include| DecisionRow {
        topic_id: topic.to_string(),
        doc_id: doc.to_string(),
        method_id: method_id.clone(),
        ensemble_id: ensemble_id.clone(),
        setting,
        s_norm,
        theta,
        include,
    };
    for (topic, st) in exp.dataset.topics().iter().zip(&source.topics) {
        for (c, d) in exp.dataset.candidates(&topic.topic_id).iter().zip(&st.uncalibrated) {
            rows.push(mk(
                &topic.topic_id,
                &c.doc_id,
                Setting::Uncalibrated,
                None,
                None,
                d.is_include(),
            ));
        }
    }
    if let Some(th) = thresholds {
        for ((topic, st), policy) in exp.dataset.topics().iter().zip(&source.topics).zip(th) {
            for (c, &s) in exp.dataset.candidates(&topic.topic_id).iter().zip(&st.s_norm) {
                let include = decide_calibrated(s, policy.theta).is_include();
                rows.push(mk(
                    &topic.topic_id,
                    &c.doc_id,
                    Setting::Calibrated,
                    Some(s),
                    Some(policy.theta),
                    include,
                ));
            }
        }
    }
    rows
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn decisions_jsonl(rows: &[DecisionRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRow>, RunError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| RunError::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn effective(config: &ExperimentConfig) -> EffectiveSettings {
    let cal = &config.calibration;
    EffectiveSettings {
        degenerate_normalization: "all equal margins map to 1.0".into(),
        indeterminate_policy: config.indeterminate_policy,
        calibrated_fusion: "mean of member s_norm compared with theta".into(),
        ties: "include".into(),
        answer_variants: config
            .backends
            .iter()
            .map(|b| (b.name.clone(), b.variants.normalized()))
            .collect(),
        calibration_mode: cal.mode,
        extrapolation_variant: cal.extrapolation_variant,
        target_recall: cal.target_recall,
        seed_normalization: "joint with candidate pool".into(),
        seed_base_theta: (cal.mode == CalibrationMode::Seed).then(|| cal.fixed_theta.unwrap_or(1.0)),
        averaging: "macro over topics (micro also in evaluation.json)".into(),
        failed_documents: "treated as indeterminate".into(),
    }
}

/// Header lines for every results table.
pub fn report_notes(config: &ExperimentConfig) -> Vec<String> {
    let cal = &config.calibration;
    let theta = match cal.mode {
        CalibrationMode::Extrapolate => format!(
            "theta: leave-one-out {} at k={}",
            match cal.extrapolation_variant {
                ExtrapolationVariant::PerTopicMedian => "median of per-topic thresholds",
                ExtrapolationVariant::PooledMedian => "pooled median",
            },
            cal.target_recall
        ),
        CalibrationMode::Seed => format!("theta: seed-adjusted from base {}", cal.fixed_theta.unwrap_or(1.0)),
        CalibrationMode::Fixed => format!("theta: fixed {}", cal.fixed_theta.unwrap_or_default()),
    };
    vec![
        theta,
        "ensembles: uncalibrated sums likelihoods; calibrated compares the mean of member s_norm with theta".into(),
        format!(
            "F{} with beta={}, WSS at r={}, success at recall >= {}",
            config.metrics.beta, config.metrics.beta, config.metrics.wss_recall, config.metrics.success_target
        ),
    ]
}

/// Runs `stage` and writes its outputs. On failure a manifest with status
/// `failed` is still written, and no other output of the run is.
pub fn run(config: ExperimentConfig, options: RunOptions, stage: Stage) -> Result<RunOutcome, RunError> {
    let mut cfg = config;
    if let Some(seed) = options.seed {
        cfg.seed = seed;
    }
    let output_dir = cfg.output_dir.clone();
    let mut manifest = RunManifest {
        software: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        stage,
        status: "running".into(),
        error: None,
        seed: cfg.seed,
        offline: options.offline,
        effective: effective(&cfg),
        config: cfg.clone(),
        timings_ms: BTreeMap::new(),
        warnings: Warnings::default(),
        counts: Counts::default(),
        outputs: Vec::new(),
    };
    match run_inner(cfg, options, stage, &mut manifest) {
        Ok(mut outcome) => {
            manifest.status = "ok".into();
            manifest.outputs.push(MANIFEST_FILE.into());
            write_atomic(&output_dir.join(MANIFEST_FILE), &to_json(&manifest))?;
            outcome.manifest = manifest;
            Ok(outcome)
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
            manifest.outputs.clear();
            if let Err(w) = write_atomic(&output_dir.join(MANIFEST_FILE), &to_json(&manifest)) {
                log::error!("could not write failure manifest: {w}");
            }
            Err(e)
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn run_inner(
    config: ExperimentConfig,
    options: RunOptions,
    stage: Stage,
    manifest: &mut RunManifest,
) -> Result<RunOutcome, RunError> {
    let mut clock = Instant::now();
    let mut lap = |name: &str, m: &mut RunManifest| {
        m.timings_ms.insert(name.into(), clock.elapsed().as_millis() as u64);
        clock = Instant::now();
    };

    if stage == Stage::Loo && config.calibration.mode != CalibrationMode::Extrapolate {
        return Err(RunError::Config(
            "leave-one-out requires calibration mode extrapolate".into(),
        ));
    }
    if stage == Stage::Ensemble && config.ensembles.is_empty() {
        return Err(RunError::Config("no ensembles configured".into()));
    }
    let exp = Experiment::open(config, options)?;
    let a = &exp.assembly;
    let w = &mut manifest.warnings;
    w.removed_topics = a.removed_no_candidates.len() + a.removed_no_included.len();
    w.dropped_candidates = a.dropped_candidates;
    w.dropped_labels = a.dropped_labels;
    w.overwritten_labels = a.overwritten_labels;
    w.dropped_seeds = a.dropped_seeds.len();
    w.cache_skipped_lines = exp.cache.skipped_lines();
    manifest.counts.topics = exp.dataset.topics().len();
    manifest.counts.candidates = exp.dataset.num_documents();
    if exp.needs_seeds()
        && exp
            .dataset
            .seeds()
            .is_none_or(|s| s.by_topic.values().all(Vec::is_empty))
    {
        return Err(RunError::Data("seed calibration requires a seed set".into()));
    }
    lap("load", manifest);

    let scores = exp.score_all(&mut manifest.warnings, &mut manifest.counts)?;
    lap("score", manifest);
    let mut outcome = RunOutcome {
        manifest: manifest.clone(),
        decisions: Vec::new(),
        thresholds: Thresholds::new(),
        evaluation: None,
    };
    if stage == Stage::Score {
        return Ok(outcome);
    }

    let policy = exp.config.indeterminate_policy;
    let with_seeds = exp.needs_seeds();
    let mut methods = Vec::new();
    for b in &exp.config.backends {
        methods.push(method_source(
            &b.name,
            &scores[&b.name],
            &exp.dataset,
            policy,
            with_seeds,
        )?);
    }
    let mut sources: Vec<Source> = Vec::new();
    for e in &exp.config.ensembles {
        let members: Vec<(&Source, &Vec<Vec<ScoreRecord>>)> = e
            .method_ids
            .iter()
            .map(|m| {
                let (s, r) = methods.iter().find(|(s, _)| &s.id == m).expect("validated");
                (s, r)
            })
            .collect();
        sources.push(ensemble_source(&e.id, &members, policy)?);
    }
    let ensembles = sources;
    let mut sources: Vec<Source> = if stage == Stage::Ensemble {
        Vec::new()
    } else {
        methods.into_iter().map(|(s, _)| s).collect()
    };
    sources.extend(ensembles);
    manifest.warnings.degenerate_normalizations = sources
        .iter()
        .filter(|s| !s.ensemble)
        .map(|s| s.topics.iter().filter(|t| t.degenerate).count())
        .sum();

    let mut per_source = Vec::new();
    for s in &sources {
        let th = calibrate_source(&exp, s, &mut manifest.warnings)?;
        outcome.thresholds.insert(
            s.id.clone(),
            exp.dataset
                .topics()
                .iter()
                .map(|t| t.topic_id.clone())
                .zip(th.iter().cloned())
                .collect(),
        );
        per_source.push(th);
    }
    lap("calibrate", manifest);
    let out = &exp.config.output_dir;
    if stage == Stage::Calibrate {
        write_atomic(&out.join(THRESHOLDS_FILE), &to_json(&outcome.thresholds))?;
        manifest.outputs.push(THRESHOLDS_FILE.into());
        lap("write", manifest);
        return Ok(outcome);
    }

    let results: Vec<Vec<DecisionRow>> = parallel_map(
        &sources.iter().zip(&per_source).collect::<Vec<_>>(),
        exp.config.workers,
        |(s, th)| decision_rows(&exp, s, Some(th)),
    );
    outcome.decisions = results.into_iter().flatten().collect();
    manifest.counts.decisions = outcome.decisions.len();
    lap("decide", manifest);

    if stage == Stage::Loo {
        let eval = evaluate_rows(
            &outcome.decisions,
            exp.dataset.labels(),
            &exp.config.metrics,
            &exp.config.significance.pairs,
            exp.config.significance.alpha,
            report_notes(&exp.config),
        )?;
        manifest.warnings.unlabelled_decisions = eval.unlabelled;
        outcome.evaluation = Some(eval);
        lap("evaluate", manifest);
    }

    write_atomic(
        &out.join(DECISIONS_FILE),
        decisions_jsonl(&outcome.decisions).as_bytes(),
    )?;
    write_atomic(&out.join(THRESHOLDS_FILE), &to_json(&outcome.thresholds))?;
    manifest
        .outputs
        .extend([DECISIONS_FILE.to_string(), THRESHOLDS_FILE.to_string()]);
    if let Some(eval) = &outcome.evaluation {
        write_evaluation(out, eval)?;
        manifest
            .outputs
            .extend([EVALUATION_FILE, REPORT_CSV_FILE, REPORT_TEXT_FILE, SIGNIFICANCE_FILE].map(String::from));
    }
    lap("write", manifest);
    Ok(outcome)
}

/// Writes `evaluation.json`, `report.csv`, `report.txt` and
/// `significance.json`.
pub fn write_evaluation(dir: &Path, eval: &EvaluationSet) -> Result<(), RunError> {
    write_atomic(&dir.join(EVALUATION_FILE), &to_json(eval))?;
    write_atomic(&dir.join(REPORT_CSV_FILE), eval.to_csv().as_bytes())?;
    write_atomic(&dir.join(REPORT_TEXT_FILE), eval.to_text().as_bytes())?;
    write_atomic(&dir.join(SIGNIFICANCE_FILE), &to_json(&eval.significance_json()))
}

/// Scores, calibrates and decides every configured source.
pub fn run_screen(config: ExperimentConfig, options: RunOptions) -> Result<RunOutcome, RunError> {
    run(config, options, Stage::Screen)
}

/// Leave-one-out calibration over all topics, then evaluation and
/// significance tests.
pub fn run_loo_experiment(config: ExperimentConfig, options: RunOptions) -> Result<RunOutcome, RunError> {
    run(config, options, Stage::Loo)
}

/// Evaluates an existing decisions file against the config's dataset.
pub fn evaluate_decisions(config: &ExperimentConfig, decisions: &Path) -> Result<EvaluationSet, RunError> {
    config.validate()?;
    let (dataset, _) = Dataset::load_canonical(&config.data.dir)?;
    let rows = read_decisions(decisions)?;
    Ok(evaluate_rows(
        &rows,
        dataset.labels(),
        &config.metrics,
        &config.significance.pairs,
        config.significance.alpha,
        report_notes(config),
    )?)
}
