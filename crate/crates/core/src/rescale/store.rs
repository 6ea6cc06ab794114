//! Durable record of reviewer decisions.
//!
//! Every accepted record is first appended to `journal.jsonl` and synced, and
//! only then folded into `index.json` (written to a temp file and renamed). On
//! open the journal is replayed past the index's high-water mark, so a crash
//! between the two writes loses nothing.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRecord {
    pub video_id: String,
    pub factor: f64,
    pub reviewer_id: String,
    /// RFC 3339; not part of the record identity.
    #[serde(default)]
    pub timestamp: String,
    /// Patch id to approve (`true`) or reject.
    #[serde(default)]
    pub approvals: BTreeMap<String, bool>,
    pub status: SelectionStatus,
}

impl SelectionRecord {
    /// Content hash over everything but the timestamp, so a resubmitted
    /// payload maps to the same id.
    pub fn id(&self) -> String {
        let key = serde_json::json!({
            "video_id": self.video_id,
            "factor": self.factor,
            "reviewer_id": self.reviewer_id,
            "approvals": self.approvals,
            "status": self.status,
        });
        hex::encode(&Sha256::digest(key.to_string().as_bytes())[..12])
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Index {
    /// Journal lines already folded in.
    applied: usize,
    records: BTreeMap<String, SelectionRecord>,
    /// Latest record id per video.
    current: BTreeMap<String, String>,
}

impl Index {
    fn apply(&mut self, id: String, rec: SelectionRecord) {
        self.current.insert(rec.video_id.clone(), id.clone());
        self.records.insert(id, rec);
        self.applied += 1;
    }
}

#[derive(Serialize, Deserialize)]
struct JournalEntry {
    id: String,
    record: SelectionRecord,
}

pub struct SelectionStore {
    dir: PathBuf,
    index: RwLock<Index>,
    writer: Mutex<File>,
}

fn io_err(what: &str, path: &Path) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{what} {}", path.display());
    move |e| Error::io(context, e)
}

impl SelectionStore {
    /// Opens (or creates) the store in `dir`, replaying any journal entries
    /// the index has not absorbed yet.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err("creating", dir))?;
        let index_path = dir.join(INDEX_FILE);
        let mut index: Index = if index_path.exists() {
            let text = fs::read_to_string(&index_path).map_err(io_err("reading", &index_path))?;
            serde_json::from_str(&text)?
        } else {
            Index::default()
        };
        let journal_path = dir.join(JOURNAL_FILE);
        let mut lines = Vec::new();
        if journal_path.exists() {
            let text = fs::read_to_string(&journal_path).map_err(io_err("reading", &journal_path))?;
            // an unterminated last line is an append cut short by a crash;
            // it was never acknowledged, so it is dropped
            let complete = text.rfind('\n').map_or(0, |i| i + 1);
            if complete < text.len() {
                log::warn!(
                    "dropping {} bytes of torn journal tail in {}",
                    text.len() - complete,
                    journal_path.display()
                );
                let f = OpenOptions::new().write(true).open(&journal_path).map_err(io_err("opening", &journal_path))?;
                f.set_len(complete as u64).map_err(io_err("truncating", &journal_path))?;
                f.sync_all().map_err(io_err("syncing", &journal_path))?;
            }
            lines.extend(text[..complete].lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
        }
        if lines.len() < index.applied {
            return Err(Error::Config(format!(
                "{} is shorter than its index claims ({} < {})",
                journal_path.display(),
                lines.len(),
                index.applied
            )));
        }
        let replay = lines.len() - index.applied;
        for line in &lines[index.applied..] {
            let e: JournalEntry = serde_json::from_str(line)?;
            index.apply(e.id, e.record);
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(io_err("opening", &journal_path))?;
        let store = Self {
            dir: dir.to_path_buf(),
            index: RwLock::new(index),
            writer: Mutex::new(writer),
        };
        if replay > 0 {
            log::info!("replayed {replay} journal entries into the selection index");
            store.write_index(&store.index.read().expect("index lock poisoned"))?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_index(&self, index: &Index) -> Result<()> {
        let path = self.dir.join(INDEX_FILE);
        let tmp = self.dir.join(format!("{INDEX_FILE}.tmp"));
        let mut f = File::create(&tmp).map_err(io_err("writing", &tmp))?;
        f.write_all(&serde_json::to_vec_pretty(index)?).map_err(io_err("writing", &tmp))?;
        f.sync_all().map_err(io_err("syncing", &tmp))?;
        fs::rename(&tmp, &path).map_err(io_err("replacing", &path))
    }

    /// Persists `rec` and returns its id. `served_factors` are the candidate
    /// factors generated for the video; the chosen factor must be one of them.
    pub fn record(&self, rec: SelectionRecord, served_factors: &[f64]) -> Result<String> {
        if rec.reviewer_id.trim().is_empty() {
            return Err(Error::InvalidArgument("reviewer id is required".into()));
        }
        if !served_factors.iter().any(|f| (f - rec.factor).abs() < 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "factor {} was not generated for video `{}`",
                rec.factor, rec.video_id
            )));
        }
        let id = rec.id();
        // single writer: the whole check-append-index sequence is serialized
        let mut journal = self.writer.lock().expect("journal lock poisoned");
        if let Some(cur) = self.current(&rec.video_id) {
            if cur.id() == id {
                return Ok(id);
            }
            if cur.status == SelectionStatus::Approved {
                return Err(Error::Conflict(format!(
                    "video `{}` is already approved at factor {} by `{}`",
                    cur.video_id, cur.factor, cur.reviewer_id
                )));
            }
        }
        let line = serde_json::to_string(&JournalEntry {
            id: id.clone(),
            record: rec.clone(),
        })?;
        let jpath = self.dir.join(JOURNAL_FILE);
        writeln!(journal, "{line}").map_err(io_err("appending to", &jpath))?;
        journal.sync_data().map_err(io_err("syncing", &jpath))?;

        let mut index = self.index.write().expect("index lock poisoned");
        index.apply(id.clone(), rec);
        self.write_index(&index)?;
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<SelectionRecord> {
        self.index.read().expect("index lock poisoned").records.get(id).cloned()
    }

    /// The latest record for a video.
    pub fn current(&self, video_id: &str) -> Option<SelectionRecord> {
        let index = self.index.read().expect("index lock poisoned");
        index.current.get(video_id).and_then(|id| index.records.get(id)).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("index lock poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
