//! Local embedders: a deterministic hashing embedder, a lookup table for
//! planted test geometry, and a per-string cache for any backend.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{require_texts, EmbeddingVector, Embedder, ModelError};

/// Bag-of-tokens pseudo-embedder.
///
/// Each lowercase alphanumeric token seeds a ChaCha stream from its SHA-256
/// and contributes a vector with components in `[-1, 1)`; a text embeds as
/// the sum of its token vectors. Texts sharing tokens therefore land close
/// together, and results are identical across runs and platforms.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self, ModelError> {
        if dimension == 0 {
            return Err(ModelError::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dimension })
    }

    fn token_vector(&self, token: &str, acc: &mut [f64]) {
        let seed: [u8; 32] = Sha256::digest(token.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        for slot in acc.iter_mut() {
            *slot += rng.random_range(-1.0..1.0);
        }
    }

    fn embed_text(&self, text: &str) -> EmbeddingVector {
        let mut acc = vec![0.0; self.dimension];
        let mut any = false;
        for token in tokens(text) {
            self.token_vector(&token, &mut acc);
            any = true;
        }
        if !any {
            // Token-free text still gets a stable, text-specific vector.
            self.token_vector(&format!("\u{0}raw:{text}"), &mut acc);
        }
        if acc.iter().all(|v| *v == 0.0) {
            acc[0] = 1.0;
        }
        EmbeddingVector::new(acc).expect("finite by construction")
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ModelError> {
        require_texts(texts)?;
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn tag(&self) -> String {
        format!("hash-v1:{}", self.dimension)
    }
}

/// Fixed text-to-vector table. Unknown texts are an error unless a fallback
/// embedder is attached.
pub struct LookupEmbedder {
    table: HashMap<String, EmbeddingVector>,
    dimension: usize,
    fallback: Option<HashEmbedder>,
}

impl LookupEmbedder {
    pub fn new(
        entries: impl IntoIterator<Item = (String, Vec<f64>)>,
        dimension: usize,
    ) -> Result<Self, ModelError> {
        let mut table = HashMap::new();
        for (text, values) in entries {
            if values.len() != dimension {
                return Err(ModelError::InvalidInput(format!(
                    "vector for {text:?} has dimension {}, expected {dimension}",
                    values.len()
                )));
            }
            table.insert(text, EmbeddingVector::new(values)?);
        }
        Ok(Self {
            table,
            dimension,
            fallback: None,
        })
    }

    pub fn with_hash_fallback(mut self) -> Result<Self, ModelError> {
        self.fallback = Some(HashEmbedder::new(self.dimension)?);
        Ok(self)
    }
}

impl Embedder for LookupEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ModelError> {
        require_texts(texts)?;
        texts
            .iter()
            .map(|t| match (self.table.get(t), &self.fallback) {
                (Some(v), _) => Ok(v.clone()),
                (None, Some(fallback)) => Ok(fallback.embed_text(t)),
                (None, None) => Err(ModelError::InvalidInput(format!("no planted vector for {t:?}"))),
            })
            .collect()
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn tag(&self) -> String {
        format!("lookup:{}", self.dimension)
    }
}

/// Memoizes an embedder by exact input string, so repeated strings always
/// receive the identical vector within one process.
pub struct CachingEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<E: Embedder> CachingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("embed cache poisoned").len()
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Embedder> Embedder for CachingEmbedder<E> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ModelError> {
        require_texts(texts)?;
        let missing: Vec<String> = {
            let cache = self.cache.lock().expect("embed cache poisoned");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            if fresh.len() != missing.len() {
                return Err(ModelError::InvalidInput(format!(
                    "embedder returned {} vectors for {} texts",
                    fresh.len(),
                    missing.len()
                )));
            }
            let mut cache = self.cache.lock().expect("embed cache poisoned");
            for (text, vector) in missing.into_iter().zip(fresh) {
                if vector.dimension() != self.inner.dimension() {
                    return Err(ModelError::InvalidInput(format!(
                        "embedder returned dimension {}, expected {}",
                        vector.dimension(),
                        self.inner.dimension()
                    )));
                }
                // First writer wins so concurrent callers agree.
                cache.entry(text).or_insert(vector);
            }
        }
        let cache = self.cache.lock().expect("embed cache poisoned");
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn tag(&self) -> String {
        self.inner.tag()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hash_embedder_is_deterministic_and_shaped() {
        let e = HashEmbedder::new(16).unwrap();
        let out = e.embed(&strings(&["a", "a", "open gmail"])).unwrap();
        assert_eq!(out[0], out[1]);
        assert!(out.iter().all(|v| v.dimension() == 16));
        let again = HashEmbedder::new(16).unwrap().embed(&strings(&["open gmail"])).unwrap();
        assert_eq!(again[0], out[2]);
        assert!(e.embed(&[]).is_err());
        assert!(HashEmbedder::new(0).is_err());
    }

    #[test]
    fn hash_embedder_is_case_and_punctuation_insensitive() {
        let e = HashEmbedder::new(8).unwrap();
        let out = e.embed(&strings(&["Open Gmail!", "open gmail", "", "!!"])).unwrap();
        assert_eq!(out[0], out[1]);
        assert_ne!(out[2], out[3]);
    }

    struct Counting {
        calls: AtomicUsize,
        texts: AtomicUsize,
        inner: HashEmbedder,
    }

    impl Embedder for Counting {
        fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ModelError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.texts.fetch_add(texts.len(), Ordering::SeqCst);
            self.inner.embed(texts)
        }
        fn dimension(&self) -> usize {
            self.inner.dimension()
        }
        fn tag(&self) -> String {
            "counting".into()
        }
    }

    #[test]
    fn cache_deduplicates_and_preserves_order() {
        let cached = CachingEmbedder::new(Counting {
            calls: AtomicUsize::new(0),
            texts: AtomicUsize::new(0),
            inner: HashEmbedder::new(4).unwrap(),
        });
        let out = cached.embed(&strings(&["x", "y", "x"])).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], out[2]);
        assert_ne!(out[0], out[1]);
        let again = cached.embed(&strings(&["y", "x"])).unwrap();
        assert_eq!(again[0], out[1]);
        assert_eq!(cached.inner().calls.load(Ordering::SeqCst), 1);
        assert_eq!(cached.inner().texts.load(Ordering::SeqCst), 2);
        assert_eq!(cached.cached_len(), 2);
        assert!(cached.embed(&[]).is_err());
    }

    #[test]
    fn lookup_embedder_serves_planted_vectors() {
        let e = LookupEmbedder::new([("a".to_string(), vec![1.0, 0.0])], 2).unwrap();
        assert_eq!(e.embed_one("a").unwrap().values(), &[1.0, 0.0]);
        assert!(e.embed_one("b").is_err());
        let e = e.with_hash_fallback().unwrap();
        assert_eq!(e.embed_one("b").unwrap().dimension(), 2);
        assert!(LookupEmbedder::new([("a".to_string(), vec![1.0])], 2).is_err());
    }
}
