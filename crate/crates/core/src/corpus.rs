//! Topics, candidate documents, relevance labels and seed studies.
//!
//! The canonical interchange format is line-oriented JSON for topics,
//! candidates and seeds, plus TREC-style qrels for labels. Everything is
//! validated while parsing and then assembled into an immutable [`Dataset`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Validation(String),
    #[error("no evaluable topics: every topic was removed during assembly")]
    NoEvaluableTopics,
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_at(path: &Path) -> impl Fn(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A systematic review question. Documents are screened against its title.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub topic_id: String,
    pub title: String,
}

/// A retrieved document awaiting an include/exclude decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc_id: String,
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Excluded,
    Included,
}

impl Label {
    pub fn is_included(self) -> bool {
        matches!(self, Label::Included)
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Excluded => 0,
            Label::Included => 1,
        }
    }
}

/// Relevance labels keyed by `(topic_id, doc_id)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelSet {
    entries: BTreeMap<String, BTreeMap<String, Label>>,
    overwritten: usize,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a label; a repeated key overwrites the earlier value and bumps
    /// the overwrite counter.
    pub fn insert(&mut self, topic_id: &str, doc_id: &str, label: Label) {
        let previous = self
            .entries
            .entry(topic_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), label);
        if previous.is_some() {
            self.overwritten += 1;
        }
    }

    pub fn get(&self, topic_id: &str, doc_id: &str) -> Option<Label> {
        self.entries.get(topic_id)?.get(doc_id).copied()
    }

    pub fn topic(&self, topic_id: &str) -> Option<&BTreeMap<String, Label>> {
        self.entries.get(topic_id)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of duplicate keys seen while building this set.
    pub fn overwritten(&self) -> usize {
        self.overwritten
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, Label)> {
        self.entries
            .iter()
            .flat_map(|(t, docs)| docs.iter().map(move |(d, l)| (t.as_str(), d.as_str(), *l)))
    }
}

/// A seed study for a topic. Seeds that were not retrieved by the search
/// carry their own text so they can still be scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStudy {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(rename = "abstract", default, skip_serializing_if = "Option::is_none")]
    pub abstract_text: Option<String>,
    #[serde(default)]
    pub non_retrieved: bool,
}

impl SeedStudy {
    /// The seed as a scoreable document, when it carries a title.
    pub fn as_candidate(&self) -> Option<Candidate> {
        Some(Candidate {
            doc_id: self.doc_id.clone(),
            title: self.title.clone().filter(|t| !t.trim().is_empty())?,
            abstract_text: self.abstract_text.clone().unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedSet {
    pub by_topic: BTreeMap<String, Vec<SeedStudy>>,
}

impl SeedSet {
    pub fn topic(&self, topic_id: &str) -> &[SeedStudy] {
        self.by_topic.get(topic_id).map_or(&[], Vec::as_slice)
    }
}

#[derive(Deserialize)]
struct TopicLine {
    topic_id: String,
    title: String,
}

#[derive(Deserialize)]
struct CandidateLine {
    topic_id: String,
    doc_id: String,
    title: String,
    #[serde(rename = "abstract", default)]
    abstract_text: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SeedLine {
    topic_id: String,
    #[serde(flatten)]
    seed: SeedStudy,
}

fn json_lines<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R) -> impl Iterator<Item = Result<(usize, T)>> {
    reader.lines().enumerate().filter_map(|(idx, line)| {
        let line_no = idx + 1;
        match line {
            Err(e) => Some(Err(CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(
                serde_json::from_str::<T>(&l)
                    .map(|v| (line_no, v))
                    .map_err(|e| CorpusError::Parse {
                        line: line_no,
                        message: e.to_string(),
                    }),
            ),
        }
    })
}

/// Reads topics from JSONL (`topic_id`, `title`), preserving file order.
pub fn read_topics<R: BufRead>(reader: R) -> Result<Vec<Topic>> {
    let mut seen = HashMap::new();
    let mut topics = Vec::new();
    for item in json_lines::<_, TopicLine>(reader) {
        let (line, rec) = item?;
        if rec.topic_id.trim().is_empty() {
            return Err(CorpusError::Parse {
                line,
                message: "topic_id must be non-empty".into(),
            });
        }
        if rec.title.trim().is_empty() {
            return Err(CorpusError::Parse {
                line,
                message: "title must be non-empty".into(),
            });
        }
        if let Some(first) = seen.insert(rec.topic_id.clone(), line) {
            return Err(CorpusError::Validation(format!(
                "duplicate topic_id {} on lines {first} and {line}",
                rec.topic_id
            )));
        }
        topics.push(Topic {
            topic_id: rec.topic_id,
            title: rec.title,
        });
    }
    Ok(topics)
}

pub fn load_topics(path: impl AsRef<Path>) -> Result<Vec<Topic>> {
    read_topics(open(path.as_ref())?)
}

/// Parses TREC-style qrels: `topic_id iteration doc_id label`.
///
/// Blank lines and lines starting with `#` are ignored.
pub fn read_qrels<R: BufRead>(reader: R) -> Result<LabelSet> {
    let mut labels = LabelSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let [topic, _iteration, doc, label] = fields[..] else {
            return Err(CorpusError::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        };
        let label = match label {
            "0" => Label::Excluded,
            "1" => Label::Included,
            _ => {
                return Err(CorpusError::Parse {
                    line: line_no,
                    message: "label must be 0 or 1".into(),
                })
            }
        };
        labels.insert(topic, doc, label);
    }
    Ok(labels)
}

pub fn parse_qrels(path: impl AsRef<Path>) -> Result<LabelSet> {
    read_qrels(open(path.as_ref())?)
}

/// Candidates grouped by topic, in file order within each topic.
pub type CandidateMap = BTreeMap<String, Vec<Candidate>>;

pub fn read_candidates<R: BufRead>(reader: R) -> Result<CandidateMap> {
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    let mut out = CandidateMap::new();
    for item in json_lines::<_, CandidateLine>(reader) {
        let (line, rec) = item?;
        if rec.doc_id.trim().is_empty() {
            return Err(CorpusError::Parse {
                line,
                message: "doc_id must be non-empty".into(),
            });
        }
        if rec.title.trim().is_empty() {
            return Err(CorpusError::Parse {
                line,
                message: "title must be non-empty".into(),
            });
        }
        let key = (rec.topic_id.clone(), rec.doc_id.clone());
        if let Some(first) = seen.insert(key, line) {
            return Err(CorpusError::Validation(format!(
                "duplicate candidate ({}, {}) on lines {first} and {line}",
                rec.topic_id, rec.doc_id
            )));
        }
        out.entry(rec.topic_id).or_default().push(Candidate {
            doc_id: rec.doc_id,
            title: rec.title,
            abstract_text: rec.abstract_text.unwrap_or_default(),
        });
    }
    Ok(out)
}

pub fn load_candidates(path: impl AsRef<Path>) -> Result<CandidateMap> {
    read_candidates(open(path.as_ref())?)
}

pub fn read_seeds<R: BufRead>(reader: R) -> Result<SeedSet> {
    let mut set = SeedSet::default();
    for item in json_lines::<_, SeedLine>(reader) {
        let (_, rec) = item?;
        set.by_topic.entry(rec.topic_id).or_default().push(rec.seed);
    }
    Ok(set)
}

pub fn load_seeds(path: impl AsRef<Path>) -> Result<SeedSet> {
    read_seeds(open(path.as_ref())?)
}

/// What assembly removed or dropped. Every entry is a warning surfaced to
/// the run manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyReport {
    /// Topics dropped because none of their candidates is labelled included.
    pub removed_no_included: Vec<String>,
    /// Topics dropped because they have no candidates.
    pub removed_no_candidates: Vec<String>,
    /// Candidates whose topic is not in the topic list.
    pub dropped_candidates: usize,
    /// Labels for unknown topics or documents.
    pub dropped_labels: usize,
    /// Duplicate qrels lines that overwrote an earlier label.
    pub overwritten_labels: usize,
    /// Seeds dropped as `(topic_id, doc_id)`: not retrieved and not scoreable.
    pub dropped_seeds: Vec<(String, String)>,
}

/// A validated, immutable screening dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    topics: Vec<Topic>,
    candidates: CandidateMap,
    labels: LabelSet,
    seeds: Option<SeedSet>,
}

/// Assembles validated inputs into a [`Dataset`].
///
/// Topics without candidates or without any included candidate are removed;
/// labels that do not point at a known candidate are dropped. Seeds that are
/// not retrieved are kept only when they carry a title to score.
pub fn assemble_dataset(
    topics: Vec<Topic>,
    mut candidates: CandidateMap,
    labels: LabelSet,
    seeds: Option<SeedSet>,
) -> Result<(Dataset, AssemblyReport)> {
    let mut report = AssemblyReport {
        overwritten_labels: labels.overwritten(),
        ..Default::default()
    };
    let known: HashSet<String> = topics.iter().map(|t| t.topic_id.clone()).collect();
    let unknown_topics: Vec<String> = candidates.keys().filter(|t| !known.contains(*t)).cloned().collect();
    for t in unknown_topics {
        report.dropped_candidates += candidates.remove(&t).map_or(0, |c| c.len());
    }

    let mut kept_topics = Vec::new();
    let mut kept_labels = LabelSet::new();
    for topic in topics {
        let Some(cands) = candidates.get(&topic.topic_id) else {
            report.dropped_labels += labels.topic(&topic.topic_id).map_or(0, BTreeMap::len);
            report.removed_no_candidates.push(topic.topic_id);
            continue;
        };
        let doc_ids: HashSet<&str> = cands.iter().map(|c| c.doc_id.as_str()).collect();
        let mut topic_labels = Vec::new();
        if let Some(entries) = labels.topic(&topic.topic_id) {
            for (doc, label) in entries {
                if doc_ids.contains(doc.as_str()) {
                    topic_labels.push((doc.clone(), *label));
                } else {
                    report.dropped_labels += 1;
                }
            }
        }
        if !topic_labels.iter().any(|(_, l)| l.is_included()) {
            log::warn!("removing topic {}: no included candidate", topic.topic_id);
            report.removed_no_included.push(topic.topic_id.clone());
            candidates.remove(&topic.topic_id);
            continue;
        }
        for (doc, label) in topic_labels {
            kept_labels.insert(&topic.topic_id, &doc, label);
        }
        kept_topics.push(topic);
    }
    let kept_ids: HashSet<&str> = kept_topics.iter().map(|t| t.topic_id.as_str()).collect();
    report.dropped_labels += labels.iter().filter(|(t, _, _)| !known.contains(*t)).count();
    candidates.retain(|t, _| kept_ids.contains(t.as_str()));

    let seeds = seeds.map(|set| {
        let mut kept = SeedSet::default();
        for (topic_id, list) in set.by_topic {
            let Some(cands) = candidates.get(&topic_id) else {
                continue;
            };
            for mut seed in list {
                let retrieved = cands.iter().any(|c| c.doc_id == seed.doc_id);
                if retrieved {
                    seed.non_retrieved = false;
                } else if !seed.non_retrieved || seed.as_candidate().is_none() {
                    report.dropped_seeds.push((topic_id.clone(), seed.doc_id));
                    continue;
                }
                kept.by_topic.entry(topic_id.clone()).or_default().push(seed);
            }
        }
        kept
    });

    if kept_topics.is_empty() {
        return Err(CorpusError::NoEvaluableTopics);
    }
    Ok((
        Dataset {
            topics: kept_topics,
            candidates,
            labels: kept_labels,
            seeds,
        },
        report,
    ))
}

/// The four canonical files of a dataset, as text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalFiles {
    pub topics: String,
    pub candidates: String,
    pub qrels: String,
    pub seeds: Option<String>,
}

pub const TOPICS_FILE: &str = "topics.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const QRELS_FILE: &str = "qrels.txt";
pub const SEEDS_FILE: &str = "seeds.jsonl";

impl Dataset {
    pub fn topics(&self) -> &[Topic] {
        &self.topics
    }

    pub fn topic(&self, topic_id: &str) -> Option<&Topic> {
        self.topics.iter().find(|t| t.topic_id == topic_id)
    }

    pub fn candidates(&self, topic_id: &str) -> &[Candidate] {
        self.candidates.get(topic_id).map_or(&[], Vec::as_slice)
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn label(&self, topic_id: &str, doc_id: &str) -> Option<Label> {
        self.labels.get(topic_id, doc_id)
    }

    pub fn seeds(&self) -> Option<&SeedSet> {
        self.seeds.as_ref()
    }

    pub fn num_documents(&self) -> usize {
        self.candidates.values().map(Vec::len).sum()
    }

    /// Serializes to the canonical interchange formats. Output is fully
    /// determined by the dataset contents.
    pub fn to_canonical(&self) -> CanonicalFiles {
        let mut topics = String::new();
        let mut candidates = String::new();
        let mut qrels = String::new();
        for topic in &self.topics {
            topics.push_str(&serde_json::to_string(topic).expect("topic serializes"));
            topics.push('\n');
            for c in self.candidates(&topic.topic_id) {
                let line = serde_json::json!({
                    "topic_id": topic.topic_id,
                    "doc_id": c.doc_id,
                    "title": c.title,
                    "abstract": c.abstract_text,
                });
                candidates.push_str(&line.to_string());
                candidates.push('\n');
                if let Some(l) = self.label(&topic.topic_id, &c.doc_id) {
                    let _ = writeln!(qrels, "{} 0 {} {}", topic.topic_id, c.doc_id, l.as_u8());
                }
            }
        }
        let seeds = self.seeds.as_ref().map(|set| {
            let mut out = String::new();
            for topic in &self.topics {
                for seed in set.topic(&topic.topic_id) {
                    let line = SeedLine {
                        topic_id: topic.topic_id.clone(),
                        seed: seed.clone(),
                    };
                    out.push_str(&serde_json::to_string(&line).expect("seed serializes"));
                    out.push('\n');
                }
            }
            out
        });
        CanonicalFiles {
            topics,
            candidates,
            qrels,
            seeds,
        }
    }

    pub fn write_canonical(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let files = self.to_canonical();
        let write = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_at(&p))
        };
        write(TOPICS_FILE, &files.topics)?;
        write(CANDIDATES_FILE, &files.candidates)?;
        write(QRELS_FILE, &files.qrels)?;
        if let Some(seeds) = &files.seeds {
            write(SEEDS_FILE, seeds)?;
        }
        Ok(())
    }

    /// Loads a dataset previously written by [`Dataset::write_canonical`].
    pub fn load_canonical(dir: impl AsRef<Path>) -> Result<(Dataset, AssemblyReport)> {
        let dir = dir.as_ref();
        let seeds_path = dir.join(SEEDS_FILE);
        let seeds = if seeds_path.exists() {
            Some(load_seeds(&seeds_path)?)
        } else {
            None
        };
        assemble_dataset(
            load_topics(dir.join(TOPICS_FILE))?,
            load_candidates(dir.join(CANDIDATES_FILE))?,
            parse_qrels(dir.join(QRELS_FILE))?,
            seeds,
        )
    }
}

/// Shape of a generated dataset; see [`synthetic_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticCorpus {
    pub topics: usize,
    pub docs_per_topic: usize,
    /// Probability that a candidate is labelled included.
    pub prevalence: f64,
    /// Non-retrieved seed studies per topic.
    pub seeds_per_topic: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            topics: 20,
            docs_per_topic: 100,
            prevalence: 0.2,
            seeds_per_topic: 0,
            seed: 0,
        }
    }
}

/// Deterministic dataset with placeholder text. The first candidate of
/// every topic is included so that no topic is removed.
pub fn synthetic_dataset(spec: &SyntheticCorpus) -> Result<Dataset> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let mut topics = Vec::with_capacity(spec.topics);
    let mut candidates = CandidateMap::new();
    let mut labels = LabelSet::new();
    let mut seeds = SeedSet::default();
    for t in 0..spec.topics {
        let topic_id = format!("T{t:03}");
        topics.push(Topic {
            topic_id: topic_id.clone(),
            title: format!("Synthetic review question {t}"),
        });
        let mut docs = Vec::with_capacity(spec.docs_per_topic);
        for d in 0..spec.docs_per_topic {
            let doc_id = format!("{topic_id}-D{d:05}");
            let included = d == 0 || rng.random_bool(spec.prevalence);
            labels.insert(
                &topic_id,
                &doc_id,
                if included { Label::Included } else { Label::Excluded },
            );
            docs.push(Candidate {
                doc_id: doc_id.clone(),
                title: format!("Study {d} retrieved for topic {t}"),
                abstract_text: format!("Abstract of study {d}."),
            });
        }
        candidates.insert(topic_id.clone(), docs);
        if spec.seeds_per_topic > 0 {
            let list = (0..spec.seeds_per_topic)
                .map(|s| SeedStudy {
                    doc_id: format!("{topic_id}-S{s:02}"),
                    title: Some(format!("Seed study {s} for topic {t}")),
                    abstract_text: None,
                    non_retrieved: true,
                })
                .collect();
            seeds.by_topic.insert(topic_id, list);
        }
    }
    let seeds = (spec.seeds_per_topic > 0).then_some(seeds);
    assemble_dataset(topics, candidates, labels, seeds).map(|(d, _)| d)
}

/// Reads CLEF TAR topic files (`Topic:` / `Title:` headers) into topics.
///
/// Only the title is used downstream; query and PID sections are ignored.
pub fn read_clef_topic(text: &str) -> Result<Topic> {
    let mut topic_id = None;
    let mut title = None;
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Topic:") {
            topic_id.get_or_insert_with(|| rest.trim().to_string());
        } else if let Some(rest) = line.strip_prefix("Title:") {
            title.get_or_insert_with(|| rest.trim().to_string());
        }
    }
    match (topic_id, title) {
        (Some(id), Some(title)) if !id.is_empty() && !title.is_empty() => Ok(Topic { topic_id: id, title }),
        _ => Err(CorpusError::Validation(
            "CLEF topic file lacks a `Topic:` or `Title:` header".into(),
        )),
    }
}
