//! Next-token yes/no likelihoods.
//!
//! A [`Backend`] returns the next-token distribution for one prompt. The
//! [`Scorer`] renders prompts, applies the retry policy, consults the
//! [`ScoreCache`] and turns each distribution into a [`ScoreRecord`].

mod cache;
mod openai;
mod synthetic;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Candidate, Topic};
use crate::prompting::{fit_to_budget, render_prompt, PromptError, PromptTemplate, RenderedPrompt};

pub use cache::{CacheKey, ScoreCache};
pub use openai::OpenAiCompletions;
pub use synthetic::{synthetic_score, MarginModel, Separation, SyntheticBackend, SyntheticGenerator};

/// Yes/no likelihoods for one `(method, topic, document)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub method_id: String,
    pub topic_id: String,
    pub doc_id: String,
    pub p_yes: f64,
    pub p_no: f64,
    /// Neither answer token appeared in the returned distribution.
    pub indeterminate: bool,
    pub prompt_hash: String,
}

impl ScoreRecord {
    pub fn key(&self) -> CacheKey {
        CacheKey {
            method_id: self.method_id.clone(),
            topic_id: self.topic_id.clone(),
            doc_id: self.doc_id.clone(),
            prompt_hash: self.prompt_hash.clone(),
        }
    }
}

/// Whether a backend reports linear probabilities or natural-log ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassKind {
    Probability,
    #[default]
    Logprob,
}

/// The (possibly top-K truncated) next-token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub tokens: Vec<(String, f64)>,
    pub kind: MassKind,
}

impl TokenDistribution {
    pub fn probabilities(tokens: Vec<(String, f64)>) -> Self {
        Self {
            tokens,
            kind: MassKind::Probability,
        }
    }

    pub fn logprobs(tokens: Vec<(String, f64)>) -> Self {
        Self {
            tokens,
            kind: MassKind::Logprob,
        }
    }

    /// Tokens with linear probabilities in `[0, 1]`.
    pub fn linear(&self) -> impl Iterator<Item = (&str, f64)> {
        self.tokens.iter().map(move |(surface, v)| {
            let p = match self.kind {
                MassKind::Probability => *v,
                MassKind::Logprob => v.exp(),
            };
            (surface.as_str(), if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) })
        })
    }
}

/// Token surfaces counted as "yes" and as "no", compared after trimming and
/// case folding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerVariants {
    pub yes: BTreeSet<String>,
    pub no: BTreeSet<String>,
}

impl Default for AnswerVariants {
    fn default() -> Self {
        Self::new(["yes"], ["no"])
    }
}

fn fold(surface: &str) -> String {
    surface.trim().to_lowercase()
}

impl AnswerVariants {
    pub fn new<'a>(yes: impl IntoIterator<Item = &'a str>, no: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            yes: yes.into_iter().map(fold).collect(),
            no: no.into_iter().map(fold).collect(),
        }
    }

    pub fn normalized(&self) -> Self {
        Self::new(self.yes.iter().map(String::as_str), self.no.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YesNo {
    pub p_yes: f64,
    pub p_no: f64,
    pub indeterminate: bool,
}

/// Sums the probability mass of the yes and no variants. Tokens outside the
/// returned list count as zero.
pub fn extract_yes_no(dist: &TokenDistribution, variants: &AnswerVariants) -> YesNo {
    let (mut p_yes, mut p_no) = (0.0, 0.0);
    for (surface, p) in dist.linear() {
        let folded = fold(surface);
        if variants.yes.contains(&folded) {
            p_yes += p;
        } else if variants.no.contains(&folded) {
            p_no += p;
        }
    }
    let p_yes: f64 = f64::min(p_yes, 1.0);
    let p_no: f64 = f64::min(p_no, 1.0);
    YesNo {
        p_yes,
        p_no,
        indeterminate: p_yes == 0.0 && p_no == 0.0,
    }
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    /// Network or server-side failure; worth retrying.
    #[error("transport: {0}")]
    Transport(String),
    /// The backend answered with something we cannot interpret.
    #[error("protocol: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub topic_id: &'a str,
    pub doc_id: &'a str,
    pub prompt: &'a str,
}

/// Something that can produce one next-token distribution per prompt.
pub trait Backend: Send + Sync {
    fn method_id(&self) -> &str;

    fn next_token(&self, request: &ScoreRequest<'_>) -> Result<TokenDistribution, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Additional attempts after the first failure.
    pub retries: u32,
    /// Delay before the first retry; doubles on each subsequent retry.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// OpenAI-compatible `/completions` endpoint with logprobs.
    #[default]
    Openai,
    /// Deterministic generator keyed on ids; no network.
    Synthetic,
    /// Scores must already be in the cache (e.g. an external classifier).
    Cache,
}

fn default_top_k() -> usize {
    5
}
fn default_template() -> String {
    "generic".into()
}
fn default_budget() -> usize {
    crate::prompting::DEFAULT_BUDGET
}
fn default_in_flight() -> usize {
    1
}
fn default_timeout() -> u64 {
    60
}
fn default_tolerance() -> f64 {
    0.01
}

/// How to reach one scoring method and how to talk to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    /// Method identity recorded in every score record.
    pub name: String,
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Special tokens placed before and after the rendered prompt.
    #[serde(default)]
    pub prompt_prefix: String,
    #[serde(default)]
    pub prompt_suffix: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub variants: AnswerVariants,
    #[serde(default)]
    pub returns: MassKind,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Fraction of documents allowed to fail before the topic fails.
    #[serde(default = "default_tolerance")]
    pub failure_tolerance: f64,
}

impl BackendProfile {
    pub fn new(name: impl Into<String>, kind: BackendKind) -> Self {
        Self {
            name: name.into(),
            kind,
            endpoint: None,
            model: None,
            api_key_env: None,
            top_k: default_top_k(),
            template: default_template(),
            budget: default_budget(),
            prompt_prefix: String::new(),
            prompt_suffix: String::new(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            variants: AnswerVariants::default(),
            returns: MassKind::default(),
            timeout_secs: default_timeout(),
            failure_tolerance: default_tolerance(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("backend name must be non-empty".into());
        }
        if self.top_k < 2 {
            return Err(format!("{}: top_k must be at least 2", self.name));
        }
        if self.max_in_flight < 1 {
            return Err(format!("{}: max_in_flight must be at least 1", self.name));
        }
        if !(0.0..=1.0).contains(&self.failure_tolerance) {
            return Err(format!("{}: failure_tolerance must be in [0, 1]", self.name));
        }
        if self.budget == 0 {
            return Err(format!("{}: budget must be positive", self.name));
        }
        if self.kind == BackendKind::Openai && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(format!("{}: openai backends need endpoint and model", self.name));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("scoring {topic_id}/{doc_id} failed after {attempts} attempt(s): {source}")]
    Document {
        topic_id: String,
        doc_id: String,
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("cache miss for {topic_id}/{doc_id} while offline")]
    Offline { topic_id: String, doc_id: String },
    #[error("topic {topic_id}: {} of {total} documents failed ({})", failed.len(), failed.join(", "))]
    TopicFailed {
        topic_id: String,
        total: usize,
        failed: Vec<String>,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("score cache: {0}")]
    Cache(String),
}

/// Hex digest identifying the exact prompt text sent to a backend.
pub fn prompt_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..16])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub record: ScoreRecord,
    pub retries: u32,
    pub cache_hit: bool,
}

/// Outcome of scoring every candidate of one topic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopicScores {
    /// Records for documents that scored, in input order.
    pub records: Vec<ScoreRecord>,
    /// Documents that failed after retries, with the final error.
    pub failures: Vec<(String, String)>,
    pub retries: u32,
    pub cache_hits: usize,
    pub truncated: usize,
    pub indeterminate: usize,
}

/// Drives one backend: rendering, retries, caching and bounded concurrency.
pub struct Scorer<'a> {
    backend: &'a dyn Backend,
    cache: &'a ScoreCache,
    variants: AnswerVariants,
    retry: RetryPolicy,
    max_in_flight: usize,
    prefix: String,
    suffix: String,
    failure_tolerance: f64,
    offline: bool,
}

impl<'a> Scorer<'a> {
    pub fn new(backend: &'a dyn Backend, cache: &'a ScoreCache) -> Self {
        Self {
            backend,
            cache,
            variants: AnswerVariants::default(),
            retry: RetryPolicy::default(),
            max_in_flight: 1,
            prefix: String::new(),
            suffix: String::new(),
            failure_tolerance: default_tolerance(),
            offline: false,
        }
    }

    pub fn from_profile(backend: &'a dyn Backend, cache: &'a ScoreCache, profile: &BackendProfile) -> Self {
        Self {
            variants: profile.variants.normalized(),
            retry: profile.retry,
            max_in_flight: profile.max_in_flight.max(1),
            prefix: profile.prompt_prefix.clone(),
            suffix: profile.prompt_suffix.clone(),
            failure_tolerance: profile.failure_tolerance,
            ..Self::new(backend, cache)
        }
    }

    pub fn with_variants(mut self, variants: AnswerVariants) -> Self {
        self.variants = variants.normalized();
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_failure_tolerance(mut self, f: f64) -> Self {
        self.failure_tolerance = f;
        self
    }

    pub fn with_special_tokens(mut self, prefix: &str, suffix: &str) -> Self {
        self.prefix = prefix.to_string();
        self.suffix = suffix.to_string();
        self
    }

    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn method_id(&self) -> &str {
        self.backend.method_id()
    }

    /// Scores one prompt. A cached record with the same key is returned
    /// as-is; otherwise exactly one next-token distribution is requested per
    /// attempt and the result is appended to the cache.
    pub fn score_document(
        &self,
        prompt: &RenderedPrompt,
        topic_id: &str,
        doc_id: &str,
    ) -> Result<Scored, ScoringError> {
        let text = prompt.prompt.wrap(&self.prefix, &self.suffix);
        let hash = prompt_hash(text.text());
        let key = CacheKey {
            method_id: self.method_id().to_string(),
            topic_id: topic_id.to_string(),
            doc_id: doc_id.to_string(),
            prompt_hash: hash,
        };
        if let Some(record) = self.cache.get(&key) {
            return Ok(Scored {
                record,
                retries: 0,
                cache_hit: true,
            });
        }
        if self.offline {
            return Err(ScoringError::Offline {
                topic_id: key.topic_id,
                doc_id: key.doc_id,
            });
        }
        let request = ScoreRequest {
            topic_id,
            doc_id,
            prompt: text.text(),
        };
        let mut attempt = 0u32;
        let dist = loop {
            match self.backend.next_token(&request) {
                Ok(d) => break d,
                Err(e) if e.is_retryable() && attempt < self.retry.retries => {
                    let delay = self.retry.backoff_ms.saturating_mul(1 << attempt.min(16));
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
                Err(source) => {
                    return Err(ScoringError::Document {
                        topic_id: topic_id.into(),
                        doc_id: doc_id.into(),
                        attempts: attempt + 1,
                        source,
                    })
                }
            }
        };
        let yn = extract_yes_no(&dist, &self.variants);
        let record = ScoreRecord {
            method_id: key.method_id,
            topic_id: key.topic_id,
            doc_id: key.doc_id,
            p_yes: yn.p_yes,
            p_no: yn.p_no,
            indeterminate: yn.indeterminate,
            prompt_hash: key.prompt_hash,
        };
        self.cache
            .insert(record.clone())
            .map_err(|e| ScoringError::Cache(e.to_string()))?;
        Ok(Scored {
            record,
            retries: attempt,
            cache_hit: false,
        })
    }

    /// Scores every candidate of a topic with at most `max_in_flight`
    /// requests outstanding. Output follows input order.
    pub fn score_topic(
        &self,
        topic: &Topic,
        candidates: &[Candidate],
        template: &PromptTemplate,
        budget: usize,
    ) -> Result<TopicScores, ScoringError> {
        let prompts = candidates
            .iter()
            .map(|c| fit_to_budget(&render_prompt(template, &topic.title, c), budget))
            .collect::<Result<Vec<_>, _>>()?;
        let slots: Vec<Mutex<Option<Result<Scored, ScoringError>>>> =
            candidates.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(candidates.len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= candidates.len() {
                        break;
                    }
                    let out = self.score_document(&prompts[i], &topic.topic_id, &candidates[i].doc_id);
                    *slots[i].lock().expect("slot lock") = Some(out);
                });
            }
        });

        let mut scores = TopicScores {
            truncated: prompts.iter().filter(|p| p.truncated).count(),
            ..Default::default()
        };
        for (slot, cand) in slots.into_iter().zip(candidates) {
            match slot.into_inner().expect("slot lock").expect("every slot filled") {
                Ok(s) => {
                    scores.retries += s.retries;
                    scores.cache_hits += usize::from(s.cache_hit);
                    scores.indeterminate += usize::from(s.record.indeterminate);
                    scores.records.push(s.record);
                }
                Err(ScoringError::Document { attempts, source, .. }) => {
                    scores.retries += attempts - 1;
                    scores.failures.push((cand.doc_id.clone(), source.to_string()));
                }
                Err(e) => scores.failures.push((cand.doc_id.clone(), e.to_string())),
            }
        }
        let failed = scores.failures.len();
        if !candidates.is_empty() && failed as f64 / candidates.len() as f64 > self.failure_tolerance {
            return Err(ScoringError::TopicFailed {
                topic_id: topic.topic_id.clone(),
                total: candidates.len(),
                failed: scores.failures.into_iter().map(|(d, _)| d).collect(),
            });
        }
        Ok(scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(v: &[(&str, f64)]) -> TokenDistribution {
        TokenDistribution::probabilities(v.iter().map(|(s, p)| (s.to_string(), *p)).collect())
    }

    #[test]
    fn sums_case_variants() {
        let yn = extract_yes_no(
            &probs(&[("Yes", 0.55), ("yes", 0.10), ("No", 0.20)]),
            &AnswerVariants::default(),
        );
        assert!((yn.p_yes - 0.65).abs() < 1e-15);
        assert_eq!(yn.p_no, 0.20);
        assert!(!yn.indeterminate);
    }

    #[test]
    fn absent_answers_are_indeterminate() {
        let yn = extract_yes_no(&probs(&[("the", 0.9), ("a", 0.1)]), &AnswerVariants::default());
        assert_eq!((yn.p_yes, yn.p_no, yn.indeterminate), (0.0, 0.0, true));
    }

    #[test]
    fn logprobs_are_exponentiated() {
        let dist = TokenDistribution::logprobs(vec![("yes".into(), 0.5f64.ln()), ("no".into(), 0.25f64.ln())]);
        let yn = extract_yes_no(&dist, &AnswerVariants::default());
        // e^(ln 0.5) and e^(ln 0.25), computed by hand.
        assert!((yn.p_yes - 0.5).abs() < 1e-15);
        assert!((yn.p_no - 0.25).abs() < 1e-15);
    }

    #[test]
    fn whitespace_surfaces_match() {
        let yn = extract_yes_no(&probs(&[(" yes", 0.3), ("\tNO ", 0.2)]), &AnswerVariants::default());
        assert_eq!((yn.p_yes, yn.p_no), (0.3, 0.2));
    }

    #[test]
    fn custom_variants() {
        let v = AnswerVariants::new(["Yes", "y"], ["no", "n"]);
        let yn = extract_yes_no(&probs(&[("Y", 0.3), ("yes", 0.2), ("n", 0.1)]), &v);
        assert_eq!((yn.p_yes, yn.p_no), (0.5, 0.1));
    }

    #[test]
    fn profile_validation() {
        let mut p = BackendProfile::new("m", BackendKind::Synthetic);
        assert!(p.validate().is_ok());
        p.top_k = 1;
        assert!(p.validate().is_err());
        let p = BackendProfile::new("m", BackendKind::Openai);
        assert!(p.validate().is_err());
    }

    #[test]
    fn profile_from_toml_defaults() {
        let p: BackendProfile =
            toml::from_str("name = \"llama\"\nendpoint = \"http://localhost:8000/v1\"\nmodel = \"m\"\n").unwrap();
        assert_eq!(p.kind, BackendKind::Openai);
        assert_eq!(p.top_k, 5);
        assert_eq!(p.budget, 2048);
        assert_eq!(p.variants, AnswerVariants::default());
        assert!(p.validate().is_ok());
    }

    proptest! {
        #[test]
        fn adding_a_yes_token_never_lowers_p_yes(
            base in proptest::collection::vec(("[a-zA-Z ]{1,5}", 0.0f64..0.2), 0..8),
            extra in 0.0f64..0.2,
            surface in prop_oneof![Just("yes"), Just("Yes"), Just(" YES")],
        ) {
            let v = AnswerVariants::default();
            let mut tokens: Vec<(String, f64)> = base;
            let before = extract_yes_no(&TokenDistribution::probabilities(tokens.clone()), &v);
            tokens.push((surface.to_string(), extra));
            let after = extract_yes_no(&TokenDistribution::probabilities(tokens), &v);
            prop_assert!(after.p_yes >= before.p_yes);
            prop_assert_eq!(after.p_no, before.p_no);
        }
    }
}
