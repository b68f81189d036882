//! On-disk response cache: `<dir>/<first-2-hex>/<key>.json`, plus an append-only `index.jsonl`.
//!
//! Entries are written to a temp file and renamed into place, so a reader either sees
//! a complete entry or none at all.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::CacheKey;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub raw_text: String,
    pub created_at: DateTime<Utc>,
    pub judge_id: String,
    pub model_name: String,
}

/// One line of a replay file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub key: String,
    pub raw_text: String,
}

#[derive(Debug, Serialize)]
struct IndexLine<'a> {
    key: &'a str,
    judge_id: &'a str,
    model_name: &'a str,
    created_at: DateTime<Utc>,
}

#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
    index_lock: Mutex<()>,
    tmp_counter: AtomicU64,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, index_lock: Mutex::new(()), tmp_counter: AtomicU64::new(0) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &CacheKey) -> PathBuf {
        let hex = key.as_str();
        self.dir.join(&hex[..2]).join(format!("{hex}.json"))
    }

    /// A missing or unparseable file is a miss.
    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        let path = self.entry_path(key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(entry) => Some(entry),
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &CacheKey, entry: &CacheEntry) -> io::Result<()> {
        let path = self.entry_path(key);
        let parent = path.parent().expect("entry path has a shard directory");
        fs::create_dir_all(parent)?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = parent.join(format!(".{}.{}.{n}.tmp", key.as_str(), std::process::id()));
        let bytes = serde_json::to_vec(entry).map_err(io::Error::other)?;
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;

        let _guard = self.index_lock.lock().unwrap_or_else(|e| e.into_inner());
        let line = serde_json::to_string(&IndexLine {
            key: key.as_str(),
            judge_id: &entry.judge_id,
            model_name: &entry.model_name,
            created_at: entry.created_at,
        })
        .map_err(io::Error::other)?;
        let mut index = OpenOptions::new().create(true).append(true).open(self.dir.join("index.jsonl"))?;
        writeln!(index, "{line}")
    }

    /// Every complete entry as `{key, raw_text}` records, sorted by key.
    pub fn export_replay(&self) -> io::Result<Vec<ReplayRecord>> {
        let mut out = Vec::new();
        for shard in fs::read_dir(&self.dir)? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            for file in fs::read_dir(shard.path())? {
                let file = file?;
                let name = file.file_name().to_string_lossy().into_owned();
                let Some(key) = name.strip_suffix(".json") else { continue };
                if key.starts_with('.') {
                    continue;
                }
                if let Some(entry) = CacheKey::from_hex(key).and_then(|k| self.get(&k)) {
                    out.push(ReplayRecord { key: key.to_string(), raw_text: entry.raw_text });
                }
            }
        }
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }
}
