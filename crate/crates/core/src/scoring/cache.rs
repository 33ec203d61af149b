//! Append-only JSONL score cache.
//!
//! One [`ScoreRecord`] per line. On load, a later line with the same key
//! replaces an earlier one. A torn final line (from an interrupted run) is
//! skipped and counted.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use super::ScoreRecord;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub method_id: String,
    pub topic_id: String,
    pub doc_id: String,
    pub prompt_hash: String,
}

type DocKey = (String, String, String);

/// Records of one document, one per prompt hash; the last entry is the most
/// recently written.
#[derive(Default)]
struct Index {
    docs: HashMap<DocKey, Vec<ScoreRecord>>,
    len: usize,
}

impl Index {
    fn put(&mut self, record: ScoreRecord) {
        let key = (record.method_id.clone(), record.topic_id.clone(), record.doc_id.clone());
        let entry = self.docs.entry(key).or_default();
        if let Some(i) = entry.iter().position(|r| r.prompt_hash == record.prompt_hash) {
            entry.remove(i);
        } else {
            self.len += 1;
        }
        entry.push(record);
    }

    fn doc(&self, method_id: &str, topic_id: &str, doc_id: &str) -> Option<&[ScoreRecord]> {
        self.docs
            .get(&(method_id.to_string(), topic_id.to_string(), doc_id.to_string()))
            .map(Vec::as_slice)
    }
}

/// Score cache shared by all scoring workers: many readers, one writer.
pub struct ScoreCache {
    path: Option<PathBuf>,
    index: RwLock<Index>,
    writer: Mutex<Option<BufWriter<File>>>,
    skipped_lines: usize,
}

impl ScoreCache {
    /// A cache that lives only in memory.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            index: RwLock::new(Index::default()),
            writer: Mutex::new(None),
            skipped_lines: 0,
        }
    }

    /// Opens (creating if needed) a cache file and loads its records.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut index = Index::default();
        let mut skipped = 0;
        if path.exists() {
            for record in read_records(&path, &mut skipped)? {
                index.put(record);
            }
        } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        if ends_without_newline(&path)? {
            file.write_all(b"\n")?;
        }
        Ok(Self {
            path: Some(path),
            index: RwLock::new(index),
            writer: Mutex::new(Some(BufWriter::new(file))),
            skipped_lines: skipped,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Lines that failed to parse on load.
    pub fn skipped_lines(&self) -> usize {
        self.skipped_lines
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache lock").len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<ScoreRecord> {
        let index = self.index.read().expect("cache lock");
        index
            .doc(&key.method_id, &key.topic_id, &key.doc_id)?
            .iter()
            .find(|r| r.prompt_hash == key.prompt_hash)
            .cloned()
    }

    /// Most recently written record for a document regardless of prompt.
    /// Used for score sources whose prompts are not known here.
    pub fn latest(&self, method_id: &str, topic_id: &str, doc_id: &str) -> Option<ScoreRecord> {
        let index = self.index.read().expect("cache lock");
        index.doc(method_id, topic_id, doc_id)?.last().cloned()
    }

    /// Appends a record and makes it visible to readers.
    pub fn insert(&self, record: ScoreRecord) -> io::Result<()> {
        {
            let mut writer = self.writer.lock().expect("cache writer lock");
            if let Some(w) = writer.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
        }
        self.index.write().expect("cache lock").put(record);
        Ok(())
    }

    /// Every record, sorted by key.
    pub fn records(&self) -> Vec<ScoreRecord> {
        let index = self.index.read().expect("cache lock");
        let mut out: Vec<_> = index.docs.values().flatten().cloned().collect();
        out.sort_unstable_by(|a, b| borrowed_key(a).cmp(&borrowed_key(b)));
        out
    }
}

fn borrowed_key(r: &ScoreRecord) -> (&str, &str, &str, &str) {
    (&r.method_id, &r.topic_id, &r.doc_id, &r.prompt_hash)
}

fn ends_without_newline(path: &Path) -> io::Result<bool> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path)?;
    if f.metadata()?.len() == 0 {
        return Ok(false);
    }
    f.seek(SeekFrom::End(-1))?;
    let mut last = [0u8; 1];
    f.read_exact(&mut last)?;
    Ok(last[0] != b'\n')
}

/// Reads every parseable record of a cache file in file order.
pub(crate) fn read_records(path: &Path, skipped: &mut usize) -> io::Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ScoreRecord>(line) {
            Ok(r) => out.push(r),
            Err(e) => {
                log::warn!("{}: skipping malformed cache line: {e}", path.display());
                *skipped += 1;
            }
        }
    }
    Ok(out)
}

impl std::fmt::Debug for ScoreCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreCache")
            .field("path", &self.path)
            .field("records", &self.len())
            .finish()
    }
}
