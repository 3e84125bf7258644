//! Archive naming and at-rest backup encoding.

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use chrono::{DateTime, NaiveDate, Utc};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveLayout {
    pub archive_root: PathBuf,
    pub backup_root: PathBuf,
    pub encrypt: bool,
}

impl ArchiveLayout {
    pub fn staging_dir(&self) -> PathBuf {
        self.archive_root.join(".staging")
    }

    pub fn backup_staging_dir(&self) -> PathBuf {
        self.backup_root.join(".staging")
    }
}

/// Lowercases and replaces every non-alphanumeric character with `_`.
pub fn tool_slug(tool_name: &str) -> String {
    tool_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Calendar date used in the archive path: the source mtime's date, or the
/// harvest date when the mtime is before 1990 or in the future.
pub fn file_date(mtime: SystemTime, now: DateTime<Utc>) -> NaiveDate {
    let floor = NaiveDate::from_ymd_opt(1990, 1, 1).expect("valid date");
    let mtime: Option<DateTime<Utc>> = mtime
        .duration_since(UNIX_EPOCH)
        .ok()
        .and_then(|d| DateTime::from_timestamp(d.as_secs() as i64, d.subsec_nanos()));
    match mtime {
        Some(t) if t.date_naive() >= floor && t <= now => t.date_naive(),
        _ => now.date_naive(),
    }
}

/// What already occupies a candidate archive path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Free,
    SameContent,
    DifferentContent,
}

pub fn canonical_path(slug: &str, file_name: &str, date: NaiveDate) -> String {
    format!("{slug}/data/{}/{file_name}", date.format("%Y%m%d"))
}

pub fn versioned(path: &str, k: u32) -> String {
    format!("{path}.v{k}")
}

/// `<slug>/data/<YYYYMMDD>/<file_name>`; when that path holds different
/// content, the smallest `.v<k>` (k ≥ 2) that is free or already identical.
pub fn archive_path(slug: &str, file_name: &str, date: NaiveDate, existing: impl Fn(&str) -> Slot) -> String {
    let canonical = canonical_path(slug, file_name, date);
    if existing(&canonical) != Slot::DifferentContent {
        return canonical;
    }
    (2..)
        .map(|k| versioned(&canonical, k))
        .find(|p| existing(p) != Slot::DifferentContent)
        .expect("unbounded search")
}

/// Smallest `.v<k>` (k ≥ 2) not present, for retaining a displaced version.
pub fn free_version_slot(path: &str, exists: impl Fn(&str) -> bool) -> String {
    (2..)
        .map(|k| versioned(path, k))
        .find(|p| !exists(p))
        .expect("unbounded search")
}

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("backup could not be decoded: {0}")]
    Decode(String),
    #[error("invalid key: {0}")]
    Key(String),
}

/// Symmetric transform applied to backup copies.
pub trait BackupCodec: Send + Sync {
    fn name(&self) -> &'static str;
    fn encode(&self, plain: &[u8]) -> Vec<u8>;
    fn decode(&self, stored: &[u8]) -> Result<Vec<u8>, CodecError>;
}

pub struct PlainCodec;

impl BackupCodec for PlainCodec {
    fn name(&self) -> &'static str {
        "plain"
    }

    fn encode(&self, plain: &[u8]) -> Vec<u8> {
        plain.to_vec()
    }

    fn decode(&self, stored: &[u8]) -> Result<Vec<u8>, CodecError> {
        Ok(stored.to_vec())
    }
}

/// ChaCha20-Poly1305 with a random 96-bit nonce prefixed to each file.
pub struct ChaChaCodec {
    cipher: ChaCha20Poly1305,
}

const NONCE_LEN: usize = 12;

impl ChaChaCodec {
    pub fn new(key: &[u8; 32]) -> Self {
        ChaChaCodec {
            cipher: ChaCha20Poly1305::new(Key::from_slice(key)),
        }
    }

    pub fn from_hex(key: &str) -> Result<Self, CodecError> {
        let bytes = hex::decode(key.trim()).map_err(|e| CodecError::Key(e.to_string()))?;
        let key: [u8; 32] = bytes
            .try_into()
            .map_err(|b: Vec<u8>| CodecError::Key(format!("expected 32 bytes, got {}", b.len())))?;
        Ok(Self::new(&key))
    }
}

impl BackupCodec for ChaChaCodec {
    fn name(&self) -> &'static str {
        "chacha20poly1305"
    }

    fn encode(&self, plain: &[u8]) -> Vec<u8> {
        let nonce: [u8; NONCE_LEN] = rand::random();
        let sealed = self
            .cipher
            .encrypt(Nonce::from_slice(&nonce), plain)
            .expect("in-memory encryption does not fail");
        let mut out = Vec::with_capacity(NONCE_LEN + sealed.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&sealed);
        out
    }

    fn decode(&self, stored: &[u8]) -> Result<Vec<u8>, CodecError> {
        if stored.len() < NONCE_LEN {
            return Err(CodecError::Decode("shorter than nonce".into()));
        }
        let (nonce, sealed) = stored.split_at(NONCE_LEN);
        self.cipher
            .decrypt(Nonce::from_slice(nonce), sealed)
            .map_err(|_| CodecError::Decode("authentication failed".into()))
    }
}
