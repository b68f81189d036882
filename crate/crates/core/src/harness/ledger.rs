//! Append-only verdict ledger. One JSON object per line; appends go through a single lock.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::model::{EvalQuestion, Metric, ParsedAnswer, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub sample_id: String,
    pub model_id: String,
    pub question_id: String,
    pub metric: Metric,
    pub judge_id: String,
    pub raw_text: String,
    pub parsed_answer: ParsedAnswer,
    pub is_match: bool,
    pub prompt_hash: String,
    pub cache_key: String,
    pub from_cache: bool,
    /// Set when the answer came from an opt-in re-query after an unparseable reply.
    #[serde(default)]
    pub requeried: bool,
}

impl LedgerEntry {
    pub fn key(&self) -> (String, String, String) {
        (self.sample_id.clone(), self.model_id.clone(), self.question_id.clone())
    }

    /// Rebuilds the verdict; the match is recomputed from the question's reference.
    pub fn verdict(&self, question: &EvalQuestion) -> Verdict {
        Verdict::new(question, &self.model_id, &self.judge_id, &self.raw_text, self.parsed_answer)
    }
}

#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    file: Mutex<File>,
}

impl Ledger {
    /// Opens (creating) the ledger and returns its entries in file order.
    ///
    /// An unterminated final line is what an interrupted append leaves behind; it is cut off.
    pub fn open(path: &Path) -> Result<(Self, Vec<LedgerEntry>), HarnessError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        let mut bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(HarnessError::io(path, e)),
        };
        if !bytes.is_empty() && !bytes.ends_with(b"\n") {
            let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
            log::warn!("ledger {}: dropping {} bytes of a torn final line", path.display(), bytes.len() - keep);
            bytes.truncate(keep);
            let f = OpenOptions::new().write(true).open(path).map_err(|e| HarnessError::io(path, e))?;
            f.set_len(keep as u64).map_err(|e| HarnessError::io(path, e))?;
        }
        let mut entries = Vec::new();
        for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let entry = serde_json::from_slice(line).map_err(|e| {
                HarnessError::Input(format!("ledger {} line {}: {e}", path.display(), i + 1))
            })?;
            entries.push(entry);
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| HarnessError::io(path, e))?;
        Ok((Self { path: path.to_path_buf(), file: Mutex::new(file) }, entries))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &LedgerEntry) -> Result<(), HarnessError> {
        let mut line = serde_json::to_vec(entry).map_err(|e| HarnessError::io(&self.path, io::Error::other(e)))?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(&line).and_then(|_| f.flush()).map_err(|e| HarnessError::io(&self.path, e))
    }
}
