//! Content-addressed response cache.
//!
//! Keys are SHA-256 of the canonicalized request (endpoint + body bytes;
//! request images ride inside the body, so image content is part of the
//! key). Entries carry their own payload digest so a corrupt or truncated
//! file is detected, evicted, and treated as a miss rather than served.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::seeding::sha256_hex;

pub struct ResponseCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn key(endpoint: &str, body: &[u8]) -> String {
        let mut canonical = Vec::with_capacity(endpoint.len() + body.len() + 16);
        canonical.extend_from_slice(&(endpoint.len() as u64).to_le_bytes());
        canonical.extend_from_slice(endpoint.as_bytes());
        canonical.extend_from_slice(body);
        sha256_hex(&canonical)
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    pub fn get(&self, key: &str) -> Option<Vec<u8>> {
        let path = self.entry_path(key);
        match read_entry(&path) {
            Some(payload) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(payload)
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn put(&self, key: &str, payload: &[u8]) -> std::io::Result<()> {
        let mut content = Vec::with_capacity(payload.len() + 65);
        content.extend_from_slice(sha256_hex(payload).as_bytes());
        content.push(b'\n');
        content.extend_from_slice(payload);
        // temp file + rename: readers only ever see complete entries
        let tmp = self.root.join(format!(
            "{key}.tmp.{}.{}",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, &content)?;
        std::fs::rename(&tmp, self.entry_path(key))?;
        Ok(())
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

/// Verify the self-digest; evict on any mismatch.
fn read_entry(path: &Path) -> Option<Vec<u8>> {
    let content = std::fs::read(path).ok()?;
    let valid = content.len() > 64
        && content[64] == b'\n'
        && content[..64] == *sha256_hex(&content[65..]).as_bytes();
    if !valid {
        log::warn!("evicting corrupt cache entry {}", path.display());
        let _ = std::fs::remove_file(path);
        return None;
    }
    Some(content[65..].to_vec())
}
