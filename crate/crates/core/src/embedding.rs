//! Text embeddings, a content-addressed cache, and similarity scoring.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonl;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding backend {backend}: {message}")]
    Backend { backend: String, message: String },
    #[error("cache integrity: backend {backend} produced dim {got}, cache holds dim {expected}")]
    Integrity {
        backend: String,
        expected: usize,
        got: usize,
    },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid embedding: {0}")]
    Invalid(String),
    #[error("cache file: {0}")]
    CacheFile(#[from] jsonl::JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Invalid("zero-dimensional vector".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(EmbeddingError::Invalid(format!("non-finite component {bad}")));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Raw dot product. No normalization is applied.
pub fn similarity(q: &EmbeddingVector, c: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if q.dim() != c.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            left: q.dim(),
            right: c.dim(),
        });
    }
    Ok(q.values.iter().zip(&c.values).map(|(a, b)| a * b).sum())
}

pub fn cosine(q: &EmbeddingVector, c: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    let dot = similarity(q, c)?;
    let denom = q.norm() * c.norm();
    Ok(if denom == 0.0 { 0.0 } else { dot / denom })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    #[default]
    Dot,
    Cosine,
}

impl SimilarityKind {
    pub fn score(self, q: &EmbeddingVector, c: &EmbeddingVector) -> Result<f64, EmbeddingError> {
        match self {
            SimilarityKind::Dot => similarity(q, c),
            SimilarityKind::Cosine => cosine(q, c),
        }
    }
}

pub trait EmbeddingBackend: Send + Sync {
    /// Stable identifier used as the cache namespace.
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError>;
}

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Offline backend: unit-norm Gaussian vectors seeded by the SHA-256 of the text.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    id: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self {
            dim,
            id: format!("hash-{dim}"),
        }
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut values: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            values[0] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(values)
    }
}

/// Lookup-table backend for tests and hand-built fixtures. Unknown text is a
/// backend error.
#[derive(Debug, Clone)]
pub struct StaticEmbedder {
    id: String,
    table: HashMap<String, Vec<f64>>,
}

impl StaticEmbedder {
    pub fn new(id: &str, table: HashMap<String, Vec<f64>>) -> Self {
        Self {
            id: id.to_string(),
            table,
        }
    }
}

impl EmbeddingBackend for StaticEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| EmbeddingError::Backend {
                backend: self.id.clone(),
                message: format!("no vector for text {text:?}"),
            })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    backend: String,
    hash: String,
    values: Vec<f64>,
}

/// Embeddings keyed by (backend id, content hash). Reads are concurrent,
/// writes are serialized behind the lock.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(String, String), EmbeddingVector>>,
    dims: RwLock<HashMap<String, usize>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, backend: &str, hash: &str) -> Option<EmbeddingVector> {
        let found = self
            .entries
            .read()
            .expect("cache lock poisoned")
            .get(&(backend.to_string(), hash.to_string()))
            .cloned();
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn insert(
        &self,
        backend: &str,
        hash: &str,
        vector: EmbeddingVector,
    ) -> Result<(), EmbeddingError> {
        {
            let mut dims = self.dims.write().expect("cache lock poisoned");
            let expected = *dims.entry(backend.to_string()).or_insert(vector.dim());
            if expected != vector.dim() {
                return Err(EmbeddingError::Integrity {
                    backend: backend.to_string(),
                    expected,
                    got: vector.dim(),
                });
            }
        }
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert((backend.to_string(), hash.to_string()), vector);
        Ok(())
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let cache = Self::new();
        let file = File::open(path).map_err(jsonl::JsonlError::from)?;
        let lines: Vec<CacheLine> = jsonl::read_records(BufReader::new(file))?;
        for line in lines {
            cache.insert(&line.backend, &line.hash, EmbeddingVector::new(line.values)?)?;
        }
        Ok(cache)
    }

    /// Persist as one JSON Lines file, sorted by key.
    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let entries = self.entries.read().expect("cache lock poisoned");
        let mut lines: Vec<CacheLine> = entries
            .iter()
            .map(|((backend, hash), v)| CacheLine {
                backend: backend.clone(),
                hash: hash.clone(),
                values: v.values.clone(),
            })
            .collect();
        lines.sort_by(|a, b| (&a.backend, &a.hash).cmp(&(&b.backend, &b.hash)));
        let file = File::create(path).map_err(jsonl::JsonlError::from)?;
        jsonl::write_records(BufWriter::new(file), &lines)?;
        Ok(())
    }
}

/// Consult the cache, fall back to the backend, and store the result.
pub fn embed_text(
    text: &str,
    backend: &dyn EmbeddingBackend,
    cache: &EmbeddingCache,
) -> Result<EmbeddingVector, EmbeddingError> {
    let hash = content_hash(text);
    if let Some(v) = cache.get(backend.id(), &hash) {
        return Ok(v);
    }
    let vector = fetch(text, backend)?;
    cache.insert(backend.id(), &hash, vector.clone())?;
    Ok(vector)
}

fn fetch(text: &str, backend: &dyn EmbeddingBackend) -> Result<EmbeddingVector, EmbeddingError> {
    if text.is_empty() {
        return Err(EmbeddingError::Invalid("cannot embed empty text".into()));
    }
    EmbeddingVector::new(backend.embed(text)?)
}

/// A backend plus an optional shared cache.
pub struct Embedder {
    backend: Box<dyn EmbeddingBackend>,
    cache: Option<Arc<EmbeddingCache>>,
}

impl Embedder {
    pub fn new(backend: Box<dyn EmbeddingBackend>, cache: Arc<EmbeddingCache>) -> Self {
        Self {
            backend,
            cache: Some(cache),
        }
    }

    pub fn uncached(backend: Box<dyn EmbeddingBackend>) -> Self {
        Self {
            backend,
            cache: None,
        }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn cache(&self) -> Option<&Arc<EmbeddingCache>> {
        self.cache.as_ref()
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        match &self.cache {
            Some(cache) => embed_text(text, self.backend.as_ref(), cache),
            None => fetch(text, self.backend.as_ref()),
        }
    }

    /// Embed many texts with at most `max_in_flight` concurrent backend calls.
    /// Output order follows input order.
    pub fn embed_many(
        &self,
        texts: &[&str],
        max_in_flight: usize,
    ) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(max_in_flight.max(1))
            .build()
            .map_err(|e| EmbeddingError::Backend {
                backend: self.backend_id().to_string(),
                message: format!("thread pool: {e}"),
            })?;
        pool.install(|| texts.par_iter().map(|t| self.embed(t)).collect())
    }
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("backend", &self.backend.id())
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

#[cfg(feature = "remote")]
pub use remote::RemoteEmbedder;

#[cfg(feature = "remote")]
mod remote {
    use std::time::Duration;

    use serde_json::json;

    use super::{EmbeddingBackend, EmbeddingError};

    /// OpenAI-compatible `/embeddings` client.
    pub struct RemoteEmbedder {
        id: String,
        endpoint: String,
        api_key: Option<String>,
        model: String,
        max_retries: usize,
        agent: ureq::Agent,
    }

    impl RemoteEmbedder {
        pub const ENDPOINT_VAR: &'static str = "PATHSYNTH_EMBEDDING_ENDPOINT";
        pub const KEY_VAR: &'static str = "PATHSYNTH_EMBEDDING_API_KEY";
        pub const MODEL_VAR: &'static str = "PATHSYNTH_EMBEDDING_MODEL";

        pub fn new(endpoint: &str, api_key: Option<String>, model: &str, max_retries: usize) -> Self {
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(60)))
                .http_status_as_error(false)
                .build()
                .into();
            Self {
                id: format!("remote:{model}"),
                endpoint: endpoint.trim_end_matches('/').to_string(),
                api_key,
                model: model.to_string(),
                max_retries,
                agent,
            }
        }

        pub fn from_env(max_retries: usize) -> Result<Self, EmbeddingError> {
            let endpoint = std::env::var(Self::ENDPOINT_VAR).map_err(|_| EmbeddingError::Backend {
                backend: "remote".into(),
                message: format!("{} is not set", Self::ENDPOINT_VAR),
            })?;
            let model = std::env::var(Self::MODEL_VAR).unwrap_or_else(|_| "bge-small-en-v1.5".into());
            Ok(Self::new(&endpoint, std::env::var(Self::KEY_VAR).ok(), &model, max_retries))
        }

        fn attempt(&self, text: &str) -> Result<Vec<f64>, (bool, String)> {
            let mut req = self.agent.post(format!("{}/embeddings", self.endpoint));
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req
                .send_json(json!({ "model": self.model, "input": text }))
                .map_err(|e| (true, e.to_string()))?;
            let status = resp.status().as_u16();
            if status == 429 || status >= 500 {
                return Err((true, format!("HTTP {status}")));
            }
            if status >= 400 {
                return Err((false, format!("HTTP {status}")));
            }
            let body: serde_json::Value = resp
                .body_mut()
                .read_json()
                .map_err(|e| (false, e.to_string()))?;
            body["data"][0]["embedding"]
                .as_array()
                .and_then(|xs| xs.iter().map(|x| x.as_f64()).collect::<Option<Vec<_>>>())
                .ok_or_else(|| (false, "response lacks data[0].embedding".to_string()))
        }
    }

    impl EmbeddingBackend for RemoteEmbedder {
        fn id(&self) -> &str {
            &self.id
        }

        fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
            let mut last = String::new();
            for attempt in 0..=self.max_retries {
                match self.attempt(text) {
                    Ok(v) => return Ok(v),
                    Err((retryable, msg)) => {
                        last = msg;
                        if !retryable {
                            break;
                        }
                        std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                    }
                }
            }
            Err(EmbeddingError::Backend {
                backend: self.id.clone(),
                message: last,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn dot_products() {
        assert_eq!(similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(similarity(&v(&[2.0, 3.0]), &v(&[4.0, 5.0])).unwrap(), 23.0);
        assert!(matches!(
            similarity(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
    }

    #[test]
    fn hash_backend_is_unit_norm_and_stable() {
        let b = HashEmbedder::new(64);
        let x = v(&b.embed("some text").unwrap());
        assert!((x.norm() - 1.0).abs() < 1e-6);
        assert_eq!(x, v(&b.embed("some text").unwrap()));
        assert_ne!(x, v(&b.embed("other text").unwrap()));
    }

    #[test]
    fn second_call_hits_cache() {
        let cache = Arc::new(EmbeddingCache::new());
        let e = Embedder::new(Box::new(HashEmbedder::new(16)), cache.clone());
        let a = e.embed("hello").unwrap();
        assert_eq!((cache.hits(), cache.misses()), (0, 1));
        let b = e.embed("hello").unwrap();
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        assert_eq!(a.values(), b.values());
    }

    struct FixedDim(usize);
    impl EmbeddingBackend for FixedDim {
        fn id(&self) -> &str {
            "shared"
        }
        fn embed(&self, _text: &str) -> Result<Vec<f64>, EmbeddingError> {
            Ok(vec![0.5; self.0])
        }
    }

    #[test]
    fn dimension_change_is_integrity_error() {
        let cache = EmbeddingCache::new();
        embed_text("a", &FixedDim(768), &cache).unwrap();
        let err = embed_text("b", &FixedDim(384), &cache).unwrap_err();
        assert!(matches!(
            err,
            EmbeddingError::Integrity {
                expected: 768,
                got: 384,
                ..
            }
        ));
    }

    #[test]
    fn cache_file_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = EmbeddingCache::new();
        let b = HashEmbedder::new(32);
        let original = embed_text("persist me", &b, &cache).unwrap();
        cache.save(&path).unwrap();
        let loaded = EmbeddingCache::load(&path).unwrap();
        let hit = loaded.get(b.id(), &content_hash("persist me")).unwrap();
        for (x, y) in original.values().iter().zip(hit.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn embed_many_preserves_order() {
        let e = Embedder::uncached(Box::new(HashEmbedder::new(8)));
        let texts = ["a", "b", "c", "d", "e"];
        let batch = e.embed_many(&texts, 3).unwrap();
        for (t, got) in texts.iter().zip(&batch) {
            assert_eq!(&e.embed(t).unwrap(), got);
        }
    }

    proptest! {
        #[test]
        fn bilinear_and_symmetric(
            q in prop::collection::vec(-10.0f64..10.0, 6),
            c in prop::collection::vec(-10.0f64..10.0, 6),
            alpha in -5.0f64..5.0,
        ) {
            let qv = v(&q);
            let cv = v(&c);
            let scaled = v(&q.iter().map(|x| alpha * x).collect::<Vec<_>>());
            let base = similarity(&qv, &cv).unwrap();
            prop_assert!((similarity(&scaled, &cv).unwrap() - alpha * base).abs() < 1e-9);
            prop_assert_eq!(base, similarity(&cv, &qv).unwrap());
        }
    }
}
