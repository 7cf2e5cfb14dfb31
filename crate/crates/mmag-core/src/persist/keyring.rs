//! Key-encryption-key registry.
//!
//! KEKs live in a small JSON file (path from config or the `MMAG_KEYRING`
//! env var). Rotation means adding a new active KEK; existing records keep
//! decrypting under the id recorded in their envelope.

use std::collections::BTreeMap;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{MemoryError, Result};
use crate::persist::envelope::KEY_LEN;

pub const KEYRING_ENV: &str = "MMAG_KEYRING";

#[derive(Debug, Serialize, Deserialize)]
struct KeyringFile {
    active: String,
    /// kek id -> 32-byte key, hex encoded.
    keys: BTreeMap<String, String>,
}

/// In-memory set of KEKs with one active id for new records.
#[derive(Debug, Clone)]
pub struct Keyring {
    active: String,
    keys: BTreeMap<String, [u8; KEY_LEN]>,
}

impl Keyring {
    /// Fresh single-key keyring with a random KEK under `active_id`.
    pub fn generate(active_id: &str) -> Keyring {
        let mut key = [0u8; KEY_LEN];
        rand::rngs::OsRng.fill_bytes(&mut key);
        let mut keys = BTreeMap::new();
        keys.insert(active_id.to_string(), key);
        Keyring {
            active: active_id.to_string(),
            keys,
        }
    }

    pub fn load(path: &Path) -> Result<Keyring> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| MemoryError::Keyring(format!("read {}: {e}", path.display())))?;
        let file: KeyringFile = serde_json::from_str(&raw)
            .map_err(|e| MemoryError::Keyring(format!("parse {}: {e}", path.display())))?;
        let mut keys = BTreeMap::new();
        for (id, hex_key) in file.keys {
            let bytes = hex::decode(&hex_key)
                .map_err(|e| MemoryError::Keyring(format!("kek {id}: {e}")))?;
            let key: [u8; KEY_LEN] = bytes
                .try_into()
                .map_err(|_| MemoryError::Keyring(format!("kek {id}: not {KEY_LEN} bytes")))?;
            keys.insert(id, key);
        }
        if !keys.contains_key(&file.active) {
            return Err(MemoryError::Keyring(format!(
                "active kek {:?} missing from keyring",
                file.active
            )));
        }
        Ok(Keyring {
            active: file.active,
            keys,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = KeyringFile {
            active: self.active.clone(),
            keys: self
                .keys
                .iter()
                .map(|(id, key)| (id.clone(), hex::encode(key)))
                .collect(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    /// Loads from `path` when it exists, otherwise generates and saves a new
    /// keyring there.
    pub fn load_or_generate(path: &Path) -> Result<Keyring> {
        if path.exists() {
            Keyring::load(path)
        } else {
            let ring = Keyring::generate("kek-1");
            ring.save(path)?;
            Ok(ring)
        }
    }

    pub fn active_id(&self) -> &str {
        &self.active
    }

    pub fn get(&self, kek_id: &str) -> Result<&[u8; KEY_LEN]> {
        self.keys
            .get(kek_id)
            .ok_or_else(|| MemoryError::UnknownKek(kek_id.to_string()))
    }

    /// Adds a KEK and makes it active for new records.
    pub fn rotate_in(&mut self, kek_id: &str, key: [u8; KEY_LEN]) {
        self.keys.insert(kek_id.to_string(), key);
        self.active = kek_id.to_string();
    }
}
