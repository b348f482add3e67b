use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Bootstrap,
    Corrected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternRecord {
    pub text: String,
    pub version: u64,
    pub updated_at: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonEntry {
    pub text: String,
    pub user: usize,
    pub timestamp: i64,
    pub phase: Phase,
}

/// One line of the append-only store log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StoreRecord {
    Pattern { user: usize, version: u64, timestamp: i64, text: String },
    Reason { item: usize, user: usize, phase: Phase, timestamp: i64, text: String },
}

/// User patterns (indexed by dense user) and item reason lists (indexed by
/// dense item). Reason lists only grow.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stores {
    pub patterns: Vec<Option<PatternRecord>>,
    pub reasons: Vec<Vec<ReasonEntry>>,
}

impl Stores {
    pub fn new(n_users: usize, n_items: usize) -> Self {
        Self { patterns: vec![None; n_users], reasons: vec![Vec::new(); n_items] }
    }

    pub fn n_users(&self) -> usize {
        self.patterns.len()
    }

    pub fn n_items(&self) -> usize {
        self.reasons.len()
    }

    pub fn pattern(&self, user: usize) -> Option<&str> {
        self.patterns.get(user)?.as_ref().map(|p| p.text.as_str())
    }

    /// Replaces the pattern, bumping its version.
    pub fn set_pattern(&mut self, user: usize, text: String, timestamp: i64) -> Result<StoreRecord> {
        let slot = self.patterns.get_mut(user).ok_or_else(|| Error::Unknown { kind: "user", id: user.to_string() })?;
        let version = slot.as_ref().map_or(1, |p| p.version + 1);
        *slot = Some(PatternRecord { text: text.clone(), version, updated_at: timestamp });
        Ok(StoreRecord::Pattern { user, version, timestamp, text })
    }

    pub fn append_reason(&mut self, item: usize, user: usize, text: String, timestamp: i64, phase: Phase) -> Result<StoreRecord> {
        let list = self.reasons.get_mut(item).ok_or_else(|| Error::Unknown { kind: "item", id: item.to_string() })?;
        list.push(ReasonEntry { text: text.clone(), user, timestamp, phase });
        Ok(StoreRecord::Reason { item, user, phase, timestamp, text })
    }

    pub fn apply(&mut self, rec: &StoreRecord) -> Result<()> {
        match rec {
            StoreRecord::Pattern { user, version, timestamp, text } => {
                let expected = self.patterns.get(*user).and_then(Option::as_ref).map_or(1, |p| p.version + 1);
                if *version != expected {
                    return Err(Error::Store(format!("user {user}: pattern version {version}, expected {expected}")));
                }
                self.set_pattern(*user, text.clone(), *timestamp)?;
            }
            StoreRecord::Reason { item, user, phase, timestamp, text } => {
                self.append_reason(*item, *user, text.clone(), *timestamp, *phase)?;
            }
        }
        Ok(())
    }

    /// Rebuilds stores from an empty state and a record log.
    pub fn replay(path: &Path, n_users: usize, n_items: usize) -> Result<Self> {
        let mut s = Self::new(n_users, n_items);
        let f = std::fs::File::open(path).at(path)?;
        for (k, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.at(path)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StoreRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { path: path.to_path_buf(), line: k + 1, detail: e.to_string() })?;
            s.apply(&rec)?;
        }
        Ok(s)
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string(self)?).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reason lists restricted to one phase.
    pub fn phase_view(&self, phase: Phase) -> Stores {
        Stores {
            patterns: self.patterns.clone(),
            reasons: self.reasons.iter().map(|l| l.iter().filter(|e| e.phase == phase).cloned().collect()).collect(),
        }
    }
}

pub struct StoreLog {
    path: PathBuf,
    out: BufWriter<std::fs::File>,
}

impl StoreLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).at(path)?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn write(&mut self, rec: &StoreRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.out, "{line}").at(&self.path)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().at(&self.path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
