//! Storage backends for sealed envelopes.
//!
//! The default is a single append-compact file with an in-memory index.
//! Erasure physically rewrites the file without the removed records, so no
//! trace of a shredded envelope (in particular its wrapped DEK) survives in
//! the backing bytes.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::PathBuf;
use std::sync::RwLock;

use crate::error::{MemoryError, Result};
use crate::persist::RecordKey;

pub trait StorageBackend: Send + Sync {
    /// Writes (or overwrites) the envelope bytes for a key. Durable on return.
    fn write(&self, key: &RecordKey, envelope: &[u8]) -> Result<()>;

    fn read(&self, key: &RecordKey) -> Result<Option<Vec<u8>>>;

    /// Physically removes the record's bytes. Idempotent; returns whether
    /// the record existed.
    fn remove(&self, key: &RecordKey) -> Result<bool>;

    /// All live keys in a namespace for one user, sorted by record id.
    fn list(&self, namespace: &str, user_id: &str) -> Result<Vec<RecordKey>>;

    /// All live keys in a namespace, across users, sorted.
    fn list_namespace(&self, namespace: &str) -> Result<Vec<RecordKey>>;

    /// Raw backing bytes, for erasure-completeness scans.
    fn raw_dump(&self) -> Result<Vec<u8>>;
}

// ---------------------------------------------------------------------------
// In-memory backend
// ---------------------------------------------------------------------------

/// HashMap-backed store for tests and ephemeral runs.
#[derive(Debug, Default)]
pub struct MemoryBackend {
    records: RwLock<HashMap<RecordKey, Vec<u8>>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl StorageBackend for MemoryBackend {
    fn write(&self, key: &RecordKey, envelope: &[u8]) -> Result<()> {
        self.records
            .write()
            .unwrap()
            .insert(key.clone(), envelope.to_vec());
        Ok(())
    }

    fn read(&self, key: &RecordKey) -> Result<Option<Vec<u8>>> {
        Ok(self.records.read().unwrap().get(key).cloned())
    }

    fn remove(&self, key: &RecordKey) -> Result<bool> {
        Ok(self.records.write().unwrap().remove(key).is_some())
    }

    fn list(&self, namespace: &str, user_id: &str) -> Result<Vec<RecordKey>> {
        let mut keys: Vec<RecordKey> = self
            .records
            .read()
            .unwrap()
            .keys()
            .filter(|k| k.namespace == namespace && k.user_id == user_id)
            .cloned()
            .collect();
        keys.sort();
        Ok(keys)
    }

    fn list_namespace(&self, namespace: &str) -> Result<Vec<RecordKey>> {
        let mut keys: Vec<RecordKey> = self
            .records
            .read()
            .unwrap()
            .keys()
            .filter(|k| k.namespace == namespace)
            .cloned()
            .collect();
        keys.sort();
        Ok(keys)
    }

    fn raw_dump(&self) -> Result<Vec<u8>> {
        let records = self.records.read().unwrap();
        let mut keys: Vec<&RecordKey> = records.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for k in keys {
            out.extend_from_slice(&records[k]);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// File backend
// ---------------------------------------------------------------------------

/// Disk entry: klen(4 BE) | key | vlen(4 BE) | envelope. Overwrites append;
/// the index keeps only the newest offset. Erase compacts immediately.
pub struct FileBackend {
    inner: RwLock<FileInner>,
}

struct FileInner {
    path: PathBuf,
    file: File,
    /// key -> (offset of envelope bytes, length)
    index: HashMap<RecordKey, (u64, u32)>,
    end: u64,
}

impl FileBackend {
    pub fn open(path: impl Into<PathBuf>) -> Result<FileBackend> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let index = scan_entries(&buf)?;
        let end = buf.len() as u64;
        Ok(FileBackend {
            inner: RwLock::new(FileInner {
                path,
                file,
                index,
                end,
            }),
        })
    }

    /// Rewrites the file keeping only live records. Runs under the write
    /// lock; used by `remove` and available for space reclamation after
    /// heavy overwriting.
    fn compact_locked(inner: &mut FileInner) -> Result<()> {
        let mut live: Vec<(RecordKey, Vec<u8>)> = Vec::with_capacity(inner.index.len());
        for (key, &(off, len)) in &inner.index {
            let mut buf = vec![0u8; len as usize];
            read_exact_at(&inner.file, &mut buf, off)?;
            live.push((key.clone(), buf));
        }
        live.sort_by(|a, b| a.0.cmp(&b.0));

        let tmp_path = inner.path.with_extension("compact.tmp");
        let mut tmp = File::create(&tmp_path)?;
        let mut index = HashMap::with_capacity(live.len());
        let mut offset = 0u64;
        for (key, envelope) in live {
            let entry = encode_entry(&key, &envelope);
            tmp.write_all(&entry)?;
            let env_off = offset + (entry.len() - envelope.len()) as u64;
            index.insert(key, (env_off, envelope.len() as u32));
            offset += entry.len() as u64;
        }
        tmp.sync_data()?;
        std::fs::rename(&tmp_path, &inner.path)?;

        inner.file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&inner.path)?;
        inner.index = index;
        inner.end = offset;
        Ok(())
    }

    pub fn compact(&self) -> Result<()> {
        let mut inner = self.inner.write().unwrap();
        Self::compact_locked(&mut inner)
    }
}

impl StorageBackend for FileBackend {
    fn write(&self, key: &RecordKey, envelope: &[u8]) -> Result<()> {
        let mut inner = self.inner.write().unwrap();
        let entry = encode_entry(key, envelope);
        let entry_start = inner.end;
        inner.file.write_all(&entry)?;
        inner.file.sync_data()?;
        let env_off = entry_start + (entry.len() - envelope.len()) as u64;
        inner.end = entry_start + entry.len() as u64;
        inner
            .index
            .insert(key.clone(), (env_off, envelope.len() as u32));
        Ok(())
    }

    fn read(&self, key: &RecordKey) -> Result<Option<Vec<u8>>> {
        let inner = self.inner.read().unwrap();
        match inner.index.get(key) {
            None => Ok(None),
            Some(&(off, len)) => {
                let mut buf = vec![0u8; len as usize];
                read_exact_at(&inner.file, &mut buf, off)?;
                Ok(Some(buf))
            }
        }
    }

    fn remove(&self, key: &RecordKey) -> Result<bool> {
        let mut inner = self.inner.write().unwrap();
        if inner.index.remove(key).is_none() {
            return Ok(false);
        }
        Self::compact_locked(&mut inner)?;
        Ok(true)
    }

    fn list(&self, namespace: &str, user_id: &str) -> Result<Vec<RecordKey>> {
        let inner = self.inner.read().unwrap();
        let mut keys: Vec<RecordKey> = inner
            .index
            .keys()
            .filter(|k| k.namespace == namespace && k.user_id == user_id)
            .cloned()
            .collect();
        keys.sort();
        Ok(keys)
    }

    fn list_namespace(&self, namespace: &str) -> Result<Vec<RecordKey>> {
        let inner = self.inner.read().unwrap();
        let mut keys: Vec<RecordKey> = inner
            .index
            .keys()
            .filter(|k| k.namespace == namespace)
            .cloned()
            .collect();
        keys.sort();
        Ok(keys)
    }

    fn raw_dump(&self) -> Result<Vec<u8>> {
        let inner = self.inner.read().unwrap();
        let mut buf = vec![0u8; inner.end as usize];
        read_exact_at(&inner.file, &mut buf, 0)?;
        Ok(buf)
    }
}

fn encode_entry(key: &RecordKey, envelope: &[u8]) -> Vec<u8> {
    let key_bytes = key.encode();
    let mut out = Vec::with_capacity(8 + key_bytes.len() + envelope.len());
    out.extend_from_slice(&(key_bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(&key_bytes);
    out.extend_from_slice(&(envelope.len() as u32).to_be_bytes());
    out.extend_from_slice(envelope);
    out
}

fn scan_entries(buf: &[u8]) -> Result<HashMap<RecordKey, (u64, u32)>> {
    let mut index = HashMap::new();
    let mut pos = 0usize;
    while pos < buf.len() {
        let klen = read_u32(buf, pos)? as usize;
        pos += 4;
        let key = RecordKey::decode(slice(buf, pos, klen)?)?;
        pos += klen;
        let vlen = read_u32(buf, pos)? as usize;
        pos += 4;
        slice(buf, pos, vlen)?;
        index.insert(key, (pos as u64, vlen as u32));
        pos += vlen;
    }
    Ok(index)
}

fn read_u32(buf: &[u8], pos: usize) -> Result<u32> {
    Ok(u32::from_be_bytes(
        slice(buf, pos, 4)?.try_into().unwrap(),
    ))
}

fn slice(buf: &[u8], pos: usize, len: usize) -> Result<&[u8]> {
    pos.checked_add(len)
        .filter(|&end| end <= buf.len())
        .map(|end| &buf[pos..end])
        .ok_or_else(|| MemoryError::Storage("store file truncated".into()))
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)?;
    Ok(())
}

#[cfg(not(unix))]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> Result<()> {
    use std::io::{Seek, SeekFrom};
    let mut f = file.try_clone()?;
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(buf)?;
    Ok(())
}
