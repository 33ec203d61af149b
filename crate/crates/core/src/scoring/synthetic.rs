//! Deterministic synthetic scores, used as a test oracle and for offline
//! dry runs.
//!
//! Each document gets a yes-minus-no margin `δ` and a total answer mass `m`
//! drawn from an RNG seeded by `(seed, topic_id, doc_id)`:
//!
//! * `δ ~ clamp(N(mean, sd), lo, hi)` using the [`MarginModel`] of the
//!   document's planted label, or `U(-1, 1)` when unlabelled;
//! * `m = |δ| + (1 - |δ|)·u` with `u ~ U(0, 1)`;
//! * `p_yes = (m + δ) / 2`, `p_no = (m - δ) / 2`.
//!
//! `δ` and `m` are rounded to multiples of 2⁻²⁰, so `p_yes - p_no == δ`
//! exactly and documents clamped to the same bound share a bit-identical
//! margin.
//!
//! For a fixed `u`, `p_yes` is increasing in `δ`, so a margin model that
//! dominates another yields stochastically larger `p_yes`.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, ScoreRecord, ScoreRequest, TokenDistribution};
use crate::corpus::{Label, LabelSet};

/// A normal distribution clamped to `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginModel {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl MarginModel {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.mean + self.sd * z).clamp(self.lo, self.hi)
    }
}

/// Margin models for planted included and excluded documents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub included: MarginModel,
    pub excluded: MarginModel,
}

impl Default for Separation {
    /// Overlapping classes: a useful but imperfect scorer.
    fn default() -> Self {
        Self {
            included: MarginModel {
                mean: 0.3,
                sd: 0.4,
                lo: -1.0,
                hi: 1.0,
            },
            excluded: MarginModel {
                mean: -0.3,
                sd: 0.4,
                lo: -1.0,
                hi: 1.0,
            },
        }
    }
}

impl Separation {
    /// Disjoint supports. Excluded documents always answer "no" (zero
    /// margin after clipping); included documents answer "yes" with a margin
    /// in `[0.4, 0.9]`, and both endpoints carry about 20% of the mass, so
    /// most topics share the same extreme scores.
    pub fn wide() -> Self {
        Self {
            included: MarginModel {
                mean: 0.65,
                sd: 0.3,
                lo: 0.4,
                hi: 0.9,
            },
            excluded: MarginModel {
                mean: -0.5,
                sd: 0.3,
                lo: -1.0,
                hi: -0.05,
            },
        }
    }
}

const GRID: f64 = (1u64 << 20) as f64;

fn quantize(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

fn rng_for(seed: u64, topic_id: &str, doc_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(topic_id.as_bytes());
    h.update([0u8]);
    h.update(doc_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Deterministic score generator.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    pub method_id: String,
    pub seed: u64,
    pub separation: Separation,
    pub labels: Option<LabelSet>,
}

impl SyntheticGenerator {
    pub fn new(method_id: impl Into<String>, seed: u64) -> Self {
        Self {
            method_id: method_id.into(),
            seed,
            separation: Separation::default(),
            labels: None,
        }
    }

    pub fn planted(mut self, labels: LabelSet, separation: Separation) -> Self {
        self.labels = Some(labels);
        self.separation = separation;
        self
    }

    /// `(p_yes, p_no)` for a document.
    pub fn probabilities(&self, topic_id: &str, doc_id: &str) -> (f64, f64) {
        // The method id is mixed in so that two synthetic methods disagree.
        let mut rng = rng_for(self.seed, &format!("{}\u{1}{topic_id}", self.method_id), doc_id);
        let label = self.labels.as_ref().and_then(|l| l.get(topic_id, doc_id));
        let delta = match label {
            Some(Label::Included) => self.separation.included.sample(&mut rng),
            Some(Label::Excluded) => self.separation.excluded.sample(&mut rng),
            None => rng.random_range(-1.0..=1.0),
        };
        let delta = quantize(delta);
        let u: f64 = rng.random();
        let mass = quantize(delta.abs() + (1.0 - delta.abs()) * u);
        let p_yes = ((mass + delta) / 2.0).clamp(0.0, 1.0);
        let p_no = ((mass - delta) / 2.0).clamp(0.0, 1.0);
        (p_yes, p_no)
    }

    pub fn score(&self, topic_id: &str, doc_id: &str) -> ScoreRecord {
        let (p_yes, p_no) = self.probabilities(topic_id, doc_id);
        ScoreRecord {
            method_id: self.method_id.clone(),
            topic_id: topic_id.to_string(),
            doc_id: doc_id.to_string(),
            p_yes,
            p_no,
            indeterminate: p_yes == 0.0 && p_no == 0.0,
            prompt_hash: String::new(),
        }
    }
}

/// Synthetic record for one document with the default separation. The
/// result depends only on `(seed, topic_id, doc_id)` and the planted label.
pub fn synthetic_score(doc_id: &str, topic_id: &str, seed: u64, planted_labels: Option<&LabelSet>) -> ScoreRecord {
    let mut g = SyntheticGenerator::new("synthetic", seed);
    if let Some(labels) = planted_labels {
        g = g.planted(labels.clone(), Separation::default());
    }
    g.score(topic_id, doc_id)
}

/// A [`Backend`] over [`SyntheticGenerator`], with optional fault injection
/// for exercising retries, failure accounting and completion order.
pub struct SyntheticBackend {
    generator: SyntheticGenerator,
    jitter_ms: u64,
    transient: HashMap<String, u32>,
    hard: HashSet<String>,
    no_answer: HashSet<String>,
    attempts: Mutex<HashMap<String, u32>>,
    calls: AtomicUsize,
}

impl SyntheticBackend {
    pub fn new(generator: SyntheticGenerator) -> Self {
        Self {
            generator,
            jitter_ms: 0,
            transient: HashMap::new(),
            hard: HashSet::new(),
            no_answer: HashSet::new(),
            attempts: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    /// Sleep up to `max_ms` per request, varying by document.
    pub fn with_jitter(mut self, max_ms: u64) -> Self {
        self.jitter_ms = max_ms;
        self
    }

    /// The listed documents fail `times` times with a transport error before
    /// succeeding.
    pub fn with_transient_failures<'a>(mut self, docs: impl IntoIterator<Item = &'a str>, times: u32) -> Self {
        self.transient.extend(docs.into_iter().map(|d| (d.to_string(), times)));
        self
    }

    /// The listed documents always fail with a transport error.
    pub fn with_hard_failures<'a>(mut self, docs: impl IntoIterator<Item = &'a str>) -> Self {
        self.hard.extend(docs.into_iter().map(str::to_string));
        self
    }

    /// The listed documents get a distribution without answer tokens.
    pub fn with_no_answer<'a>(mut self, docs: impl IntoIterator<Item = &'a str>) -> Self {
        self.no_answer.extend(docs.into_iter().map(str::to_string));
        self
    }

    /// Requests received so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn generator(&self) -> &SyntheticGenerator {
        &self.generator
    }
}

impl Backend for SyntheticBackend {
    fn method_id(&self) -> &str {
        &self.generator.method_id
    }

    fn next_token(&self, request: &ScoreRequest<'_>) -> Result<TokenDistribution, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.jitter_ms > 0 {
            let mut rng = rng_for(self.generator.seed ^ 0x5eed, request.topic_id, request.doc_id);
            std::thread::sleep(Duration::from_millis(rng.random_range(0..=self.jitter_ms)));
        }
        if self.hard.contains(request.doc_id) {
            return Err(BackendError::Transport(format!(
                "injected failure for {}",
                request.doc_id
            )));
        }
        if let Some(&times) = self.transient.get(request.doc_id) {
            let mut attempts = self.attempts.lock().expect("attempt lock");
            let n = attempts.entry(request.doc_id.to_string()).or_insert(0);
            *n += 1;
            if *n <= times {
                return Err(BackendError::Transport(format!(
                    "injected transient failure {n} for {}",
                    request.doc_id
                )));
            }
        }
        if self.no_answer.contains(request.doc_id) {
            return Ok(TokenDistribution::probabilities(vec![
                ("the".into(), 0.9),
                ("a".into(), 0.1),
            ]));
        }
        let (p_yes, p_no) = self.generator.probabilities(request.topic_id, request.doc_id);
        let rest = (1.0 - p_yes - p_no).max(0.0);
        Ok(TokenDistribution::probabilities(vec![
            ("yes".into(), p_yes),
            ("no".into(), p_no),
            ("maybe".into(), rest * 0.6),
            ("The".into(), rest * 0.4),
        ]))
    }
}
