//! Persistent embedding cache: one JSON-lines index (key → offset, dims,
//! model) plus an append-only binary log of little-endian f64 values.
//!
//! Keys hash the full `(item_id, model_id, modality, preprocessing)` tuple,
//! so re-downloaded image files do not invalidate entries; a strict variant
//! folds the content bytes into the key. Concurrent `get_or_compute` calls
//! on the same key compute at most once.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{EmbeddingVector, Modality};

const INDEX_FILE: &str = "cache.idx";
const LOG_FILE: &str = "cache.log";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache record for key {0} is corrupt")]
    CacheCorrupt(String),
    #[error("cache backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cache index damaged at line {line}: {reason}")]
    IndexDamaged { line: u64, reason: String },
}

/// Hash key for one cached embedding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(item_id: &str, model_id: &str, modality: Modality, preprocessing: &str) -> Self {
        let mut hasher = Sha256::new();
        for part in [item_id, model_id, modality.as_str(), preprocessing] {
            hasher.update(part.as_bytes());
            hasher.update([0x1f]);
        }
        CacheKey(hex::encode(hasher.finalize()))
    }

    /// Strict variant: also keyed by the content bytes.
    pub fn strict(
        item_id: &str,
        model_id: &str,
        modality: Modality,
        preprocessing: &str,
        content: &[u8],
    ) -> Self {
        let content_hash = hex::encode(Sha256::digest(content));
        let mut hasher = Sha256::new();
        for part in [
            item_id,
            model_id,
            modality.as_str(),
            preprocessing,
            content_hash.as_str(),
        ] {
            hasher.update(part.as_bytes());
            hasher.update([0x1f]);
        }
        CacheKey(hex::encode(hasher.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    key: String,
    offset: u64,
    dims: usize,
    model_id: String,
    modality: Modality,
    item_id: String,
    checksum: String,
}

struct CacheState {
    entries: HashMap<String, IndexEntry>,
    log_len: u64,
}

/// Disk-backed embedding store. Clone-free; share via `Arc`.
pub struct EmbeddingCache {
    dir: PathBuf,
    state: RwLock<CacheState>,
    flights: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl EmbeddingCache {
    pub fn open(dir: &Path) -> Result<Self, CacheError> {
        std::fs::create_dir_all(dir)?;
        let index_path = dir.join(INDEX_FILE);
        let log_path = dir.join(LOG_FILE);
        if !index_path.exists() {
            File::create(&index_path)?;
        }
        if !log_path.exists() {
            File::create(&log_path)?;
        }
        let mut entries = HashMap::new();
        let reader = BufReader::new(File::open(&index_path)?);
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexEntry =
                serde_json::from_str(&line).map_err(|e| CacheError::IndexDamaged {
                    line: idx as u64 + 1,
                    reason: e.to_string(),
                })?;
            // Later lines win: a repaired record supersedes the corrupt one.
            entries.insert(entry.key.clone(), entry);
        }
        let log_len = std::fs::metadata(&log_path)?.len();
        Ok(Self {
            dir: dir.to_path_buf(),
            state: RwLock::new(CacheState { entries, log_len }),
            flights: Mutex::new(HashMap::new()),
        })
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.state.read().unwrap().entries.contains_key(key.as_str())
    }

    pub fn len(&self) -> usize {
        self.state.read().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fetch a stored vector; `Ok(None)` on miss, `CacheCorrupt` when the
    /// stored bytes no longer match their checksum.
    pub fn get(&self, key: &CacheKey) -> Result<Option<EmbeddingVector>, CacheError> {
        let entry = {
            let state = self.state.read().unwrap();
            match state.entries.get(key.as_str()) {
                Some(entry) => entry.clone(),
                None => return Ok(None),
            }
        };
        let mut file = File::open(self.dir.join(LOG_FILE))?;
        file.seek(SeekFrom::Start(entry.offset))?;
        let mut bytes = vec![0u8; entry.dims * 8];
        file.read_exact(&mut bytes)
            .map_err(|_| CacheError::CacheCorrupt(entry.key.clone()))?;
        let checksum = hex::encode(Sha256::digest(&bytes));
        if checksum != entry.checksum {
            return Err(CacheError::CacheCorrupt(entry.key.clone()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Some(EmbeddingVector {
            item_id: entry.item_id,
            modality: entry.modality,
            model_id: entry.model_id,
            dims: entry.dims,
            values,
        }))
    }

    /// Append a vector to the log and record it in the index. Overwrites the
    /// in-memory mapping for an existing key (old bytes stay in the log).
    pub fn put(&self, key: &CacheKey, vector: &EmbeddingVector) -> Result<(), CacheError> {
        let mut bytes = Vec::with_capacity(vector.values.len() * 8);
        for v in &vector.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = hex::encode(Sha256::digest(&bytes));

        let mut state = self.state.write().unwrap();
        let offset = state.log_len;
        let mut log = OpenOptions::new().append(true).open(self.dir.join(LOG_FILE))?;
        log.write_all(&bytes)?;
        log.flush()?;
        let entry = IndexEntry {
            key: key.as_str().to_string(),
            offset,
            dims: vector.dims,
            model_id: vector.model_id.clone(),
            modality: vector.modality,
            item_id: vector.item_id.clone(),
            checksum,
        };
        let mut index = OpenOptions::new()
            .append(true)
            .open(self.dir.join(INDEX_FILE))?;
        let line = serde_json::to_string(&entry).expect("index entry serializes");
        writeln!(index, "{line}")?;
        index.flush()?;
        state.log_len = offset + bytes.len() as u64;
        state.entries.insert(entry.key.clone(), entry);
        Ok(())
    }

    /// Return the cached vector or compute and store it. At most one
    /// computation runs per key even under concurrent callers.
    pub fn get_or_compute<E, F>(
        &self,
        key: &CacheKey,
        producer: F,
    ) -> Result<EmbeddingVector, GetOrComputeError<E>>
    where
        F: FnOnce() -> Result<EmbeddingVector, E>,
    {
        self.get_or_compute_inner(key, producer, false)
    }

    /// Like [`Self::get_or_compute`], but a corrupt record is recomputed and
    /// rewritten instead of surfacing `CacheCorrupt`.
    pub fn get_or_compute_repair<E, F>(
        &self,
        key: &CacheKey,
        producer: F,
    ) -> Result<EmbeddingVector, GetOrComputeError<E>>
    where
        F: FnOnce() -> Result<EmbeddingVector, E>,
    {
        self.get_or_compute_inner(key, producer, true)
    }

    fn get_or_compute_inner<E, F>(
        &self,
        key: &CacheKey,
        producer: F,
        repair: bool,
    ) -> Result<EmbeddingVector, GetOrComputeError<E>>
    where
        F: FnOnce() -> Result<EmbeddingVector, E>,
    {
        let lookup = |cache: &Self| -> Result<Option<EmbeddingVector>, GetOrComputeError<E>> {
            match cache.get(key) {
                Ok(found) => Ok(found),
                Err(CacheError::CacheCorrupt(_)) if repair => Ok(None),
                Err(e) => Err(GetOrComputeError::Cache(e)),
            }
        };
        if let Some(found) = lookup(self)? {
            return Ok(found);
        }
        let flight = {
            let mut flights = self.flights.lock().unwrap();
            flights
                .entry(key.as_str().to_string())
                .or_insert_with(|| Arc::new(Mutex::new(())))
                .clone()
        };
        let _guard = flight.lock().unwrap();
        // Another caller may have filled the slot while we waited.
        if let Some(found) = lookup(self)? {
            return Ok(found);
        }
        let vector = producer().map_err(GetOrComputeError::Producer)?;
        self.put(key, &vector).map_err(GetOrComputeError::Cache)?;
        Ok(vector)
    }
}

#[derive(Debug, Error)]
pub enum GetOrComputeError<E> {
    #[error(transparent)]
    Cache(CacheError),
    #[error("producer failed")]
    Producer(#[source] E),
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn sample(item: &str, values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(item, Modality::Image, "mock-lvm", values.to_vec()).unwrap()
    }

    #[test]
    fn put_then_get_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let key = CacheKey::new("img1", "mock-lvm", Modality::Image, "raw");
        let vector = sample("img1", &[1.0, -2.5, 1e-300, f64::MAX / 2.0]);
        cache.put(&key, &vector).unwrap();
        let loaded = cache.get(&key).unwrap().unwrap();
        assert_eq!(loaded, vector);
    }

    #[test]
    fn distinct_models_produce_distinct_keys() {
        let a = CacheKey::new("img1", "mock-lvm", Modality::Image, "raw");
        let b = CacheKey::new("img1", "other-lvm", Modality::Image, "raw");
        let c = CacheKey::new("img1", "mock-lvm", Modality::Text, "raw");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
    }

    #[test]
    fn second_call_skips_producer() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let key = CacheKey::new("img1", "mock-lvm", Modality::Image, "raw");
        let calls = AtomicUsize::new(0);
        for _ in 0..3 {
            let got: Result<_, GetOrComputeError<std::convert::Infallible>> = cache
                .get_or_compute(&key, || {
                    calls.fetch_add(1, Ordering::SeqCst);
                    Ok(sample("img1", &[3.0, 4.0]))
                });
            assert_eq!(got.unwrap().values, vec![3.0, 4.0]);
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let key = CacheKey::new("img1", "mock-lvm", Modality::Image, "raw");
        let vector = sample("img1", &[9.0, 8.0, 7.0]);
        {
            let cache = EmbeddingCache::open(dir.path()).unwrap();
            cache.put(&key, &vector).unwrap();
        }
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        assert_eq!(cache.get(&key).unwrap().unwrap(), vector);
    }

    #[test]
    fn corrupted_record_detected_then_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let key = CacheKey::new("img1", "mock-lvm", Modality::Image, "raw");
        cache.put(&key, &sample("img1", &[1.0, 2.0])).unwrap();

        // Flip a byte in the log.
        let log_path = dir.path().join(LOG_FILE);
        let mut bytes = std::fs::read(&log_path).unwrap();
        bytes[3] ^= 0xff;
        std::fs::write(&log_path, bytes).unwrap();

        match cache.get(&key) {
            Err(CacheError::CacheCorrupt(k)) => assert_eq!(k, key.as_str()),
            other => panic!("expected CacheCorrupt, got {other:?}"),
        }
        let repaired: Result<_, GetOrComputeError<std::convert::Infallible>> =
            cache.get_or_compute_repair(&key, || Ok(sample("img1", &[1.0, 2.0])));
        assert_eq!(repaired.unwrap().values, vec![1.0, 2.0]);
        // Subsequent reads hit the repaired record.
        assert_eq!(cache.get(&key).unwrap().unwrap().values, vec![1.0, 2.0]);
    }

    #[test]
    fn without_repair_the_corruption_propagates() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let key = CacheKey::new("img1", "mock-lvm", Modality::Image, "raw");
        cache.put(&key, &sample("img1", &[1.0, 2.0])).unwrap();
        let log_path = dir.path().join(LOG_FILE);
        let mut bytes = std::fs::read(&log_path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&log_path, bytes).unwrap();

        let result: Result<_, GetOrComputeError<std::convert::Infallible>> =
            cache.get_or_compute(&key, || Ok(sample("img1", &[1.0, 2.0])));
        assert!(matches!(
            result,
            Err(GetOrComputeError::Cache(CacheError::CacheCorrupt(_)))
        ));
    }

    #[test]
    fn concurrent_same_key_computes_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(EmbeddingCache::open(dir.path()).unwrap());
        let key = CacheKey::new("img1", "mock-lvm", Modality::Image, "raw");
        let calls = Arc::new(AtomicUsize::new(0));

        std::thread::scope(|scope| {
            for _ in 0..8 {
                let cache = Arc::clone(&cache);
                let key = key.clone();
                let calls = Arc::clone(&calls);
                scope.spawn(move || {
                    let got: Result<_, GetOrComputeError<std::convert::Infallible>> = cache
                        .get_or_compute(&key, || {
                            calls.fetch_add(1, Ordering::SeqCst);
                            std::thread::sleep(std::time::Duration::from_millis(20));
                            Ok(sample("img1", &[5.0]))
                        });
                    assert_eq!(got.unwrap().values, vec![5.0]);
                });
            }
        });
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn strict_key_changes_with_content() {
        let a = CacheKey::strict("img1", "m", Modality::Image, "raw", b"bytes-a");
        let b = CacheKey::strict("img1", "m", Modality::Image, "raw", b"bytes-b");
        assert_ne!(a, b);
    }
}
