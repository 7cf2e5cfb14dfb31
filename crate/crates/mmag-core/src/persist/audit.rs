//! Append-only audit trail.
//!
//! Metadata only (never values), so the trail survives crypto-shredding and
//! can prove an erasure happened.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Put,
    Get,
    Erase,
    Inspect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub ts_ms: i64,
    pub namespace: String,
    pub user_id: String,
    pub record_id: String,
    pub action: AuditAction,
}

/// Serialized single-appender audit log. Timestamps are clamped to be
/// non-decreasing in file order.
pub struct AuditLog {
    inner: Mutex<AuditInner>,
}

struct AuditInner {
    file: Option<File>,
    path: Option<PathBuf>,
    last_ts: i64,
    /// In-memory mirror, for inspection without re-reading the file.
    entries: Vec<AuditEntry>,
}

impl AuditLog {
    /// File-backed log at `path` (created if missing, appended otherwise).
    pub fn open(path: impl Into<PathBuf>) -> Result<AuditLog> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut entries = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                entries.push(serde_json::from_str::<AuditEntry>(&line)?);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let last_ts = entries.last().map(|e| e.ts_ms).unwrap_or(i64::MIN);
        Ok(AuditLog {
            inner: Mutex::new(AuditInner {
                file: Some(file),
                path: Some(path),
                last_ts,
                entries,
            }),
        })
    }

    /// Memory-only log for ephemeral stores.
    pub fn ephemeral() -> AuditLog {
        AuditLog {
            inner: Mutex::new(AuditInner {
                file: None,
                path: None,
                last_ts: i64::MIN,
                entries: Vec::new(),
            }),
        }
    }

    pub fn append(
        &self,
        ts_ms: i64,
        namespace: &str,
        user_id: &str,
        record_id: &str,
        action: AuditAction,
    ) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let ts_ms = ts_ms.max(inner.last_ts);
        let entry = AuditEntry {
            ts_ms,
            namespace: namespace.to_string(),
            user_id: user_id.to_string(),
            record_id: record_id.to_string(),
            action,
        };
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
        }
        inner.last_ts = ts_ms;
        inner.entries.push(entry);
        Ok(())
    }

    pub fn entries_for_user(&self, user_id: &str) -> Vec<AuditEntry> {
        self.inner
            .lock()
            .unwrap()
            .entries
            .iter()
            .filter(|e| e.user_id == user_id)
            .cloned()
            .collect()
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.inner.lock().unwrap().entries.clone()
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.inner.lock().unwrap().path.clone()
    }
}

/// Reads a file-backed audit log without holding an appender open.
pub fn read_audit_file(path: &Path) -> Result<Vec<AuditEntry>> {
    let mut entries = Vec::new();
    let reader = BufReader::new(File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str::<AuditEntry>(&line)?);
    }
    Ok(entries)
}
