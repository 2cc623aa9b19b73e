//! Instruction embedding index with exact cosine top-k retrieval.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingVector, Embedder, ModelError};
use crate::store::{read_jsonl, write_jsonl, KnowledgeEntry, StoreError};

pub const DEFAULT_K: usize = 1;
pub const DEFAULT_TAU_S: f64 = 0.0;
const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,
    #[error("index is empty")]
    EmptyIndex,
    #[error("duplicate entry id {0:?}")]
    DuplicateEntry(String),
    #[error("invalid retrieval parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed index file: {0}")]
    Format(String),
    #[error(transparent)]
    Backend(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// `u·v / (|u||v|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, RetrievalError> {
    cosine_slices(u.values(), v.values())
}

pub(crate) fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::DimensionMismatch(format!("{} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub entry_id: String,
    pub instruction: String,
    #[serde(default)]
    pub app: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    dimension: usize,
    backend_tag: String,
    count: usize,
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
    norms: Vec<f64>,
    dimension: usize,
    backend_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub entry_id: String,
    pub score: f64,
    /// Position in the knowledge base.
    pub position: usize,
}

/// Knobs for one retrieval call.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrieveOptions {
    pub k: usize,
    pub tau_s: f64,
    /// Only entries of this app are candidates.
    pub app_filter: Option<String>,
    /// Entry ids that are never returned.
    pub exclude: Vec<String>,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            tau_s: DEFAULT_TAU_S,
            app_filter: None,
            exclude: Vec::new(),
        }
    }
}

impl RetrieveOptions {
    pub fn new(k: usize, tau_s: f64) -> Self {
        Self {
            k,
            tau_s,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 {
            return Err(RetrievalError::InvalidParameter("k must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau_s) {
            return Err(RetrievalError::InvalidParameter(format!(
                "tau_s {} outside [-1, 1]",
                self.tau_s
            )));
        }
        Ok(())
    }
}

impl EmbeddingIndex {
    pub fn new(
        entries: Vec<IndexEntry>,
        dimension: usize,
        backend_tag: impl Into<String>,
    ) -> Result<Self, RetrievalError> {
        if dimension == 0 {
            return Err(RetrievalError::DimensionMismatch("dimension must be positive".into()));
        }
        let mut seen = HashSet::new();
        let mut norms = Vec::with_capacity(entries.len());
        for entry in &entries {
            if !seen.insert(entry.entry_id.as_str()) {
                return Err(RetrievalError::DuplicateEntry(entry.entry_id.clone()));
            }
            if entry.vector.dimension() != dimension {
                return Err(RetrievalError::DimensionMismatch(format!(
                    "entry {} has dimension {}, index has {dimension}",
                    entry.entry_id,
                    entry.vector.dimension()
                )));
            }
            let n = norm(entry.vector.values());
            if n == 0.0 {
                return Err(RetrievalError::ZeroVector);
            }
            norms.push(n);
        }
        Ok(Self {
            entries,
            norms,
            dimension,
            backend_tag: backend_tag.into(),
        })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn backend_tag(&self) -> &str {
        &self.backend_tag
    }

    /// Writes the header record followed by one line per entry.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let header = serde_json::to_value(IndexHeader {
            dimension: self.dimension,
            backend_tag: self.backend_tag.clone(),
            count: self.entries.len(),
        })
        .expect("header serializes");
        let mut records = vec![header];
        records.extend(
            self.entries
                .iter()
                .map(|e| serde_json::to_value(e).expect("entries serialize")),
        );
        write_jsonl(path, &records)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let mut values: Vec<serde_json::Value> = read_jsonl(path)?;
        if values.is_empty() {
            return Err(RetrievalError::Format("missing header record".into()));
        }
        let header: IndexHeader = serde_json::from_value(values.remove(0))
            .map_err(|e| RetrievalError::Format(format!("header: {e}")))?;
        let entries = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                serde_json::from_value::<IndexEntry>(v)
                    .map_err(|e| RetrievalError::Format(format!("line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if entries.len() != header.count {
            return Err(RetrievalError::Format(format!(
                "header declares {} entries, file has {}",
                header.count,
                entries.len()
            )));
        }
        Self::new(entries, header.dimension, header.backend_tag)
    }

    /// Top-k entries for a query vector by exact linear scan.
    pub fn retrieve_by_vector(
        &self,
        query: &EmbeddingVector,
        options: &RetrieveOptions,
    ) -> Result<Vec<Hit>, RetrievalError> {
        options.validate()?;
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.dimension() != self.dimension {
            return Err(RetrievalError::DimensionMismatch(format!(
                "query has dimension {}, index has {}",
                query.dimension(),
                self.dimension
            )));
        }
        let q = query.values();
        let qn = norm(q);
        if qn == 0.0 {
            return Err(RetrievalError::ZeroVector);
        }
        let excluded: HashSet<&str> = options.exclude.iter().map(String::as_str).collect();
        let mut top: Vec<Hit> = Vec::with_capacity(options.k + 1);
        for (position, entry) in self.entries.iter().enumerate() {
            if excluded.contains(entry.entry_id.as_str()) {
                continue;
            }
            if let Some(app) = &options.app_filter {
                if &entry.app != app {
                    continue;
                }
            }
            let score = (dot(q, entry.vector.values()) / (qn * self.norms[position])).clamp(-1.0, 1.0);
            if score < options.tau_s {
                continue;
            }
            if top.len() == options.k && score <= top[top.len() - 1].score {
                continue;
            }
            // Equal scores keep earlier entries first.
            let at = top.partition_point(|h| h.score >= score);
            top.insert(
                at,
                Hit {
                    entry_id: entry.entry_id.clone(),
                    score,
                    position,
                },
            );
            top.truncate(options.k);
        }
        Ok(top)
    }

    /// Embeds the instruction and retrieves. The embedder must carry the
    /// index's backend tag.
    pub fn retrieve(
        &self,
        instruction: &str,
        embedder: &dyn Embedder,
        options: &RetrieveOptions,
    ) -> Result<Vec<Hit>, RetrievalError> {
        options.validate()?;
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if embedder.tag() != self.backend_tag {
            return Err(RetrievalError::DimensionMismatch(format!(
                "index built with {:?}, embedder is {:?}",
                self.backend_tag,
                embedder.tag()
            )));
        }
        let query = embedder.embed_one(instruction)?;
        self.retrieve_by_vector(&query, options)
    }
}

/// Embeds every entry instruction, in batches, preserving order. Identical
/// instructions are embedded once and share a vector.
pub fn build_index(kb: &[KnowledgeEntry], embedder: &dyn Embedder) -> Result<EmbeddingIndex, RetrievalError> {
    if kb.is_empty() {
        return Err(RetrievalError::EmptyKnowledgeBase);
    }
    let mut unique: Vec<String> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for entry in kb {
        slot.entry(entry.instruction.as_str()).or_insert_with(|| {
            unique.push(entry.instruction.clone());
            unique.len() - 1
        });
    }
    let mut vectors = Vec::with_capacity(unique.len());
    for batch in unique.chunks(EMBED_BATCH) {
        let out = embedder.embed(batch)?;
        if out.len() != batch.len() {
            return Err(RetrievalError::Backend(ModelError::InvalidInput(format!(
                "embedder returned {} vectors for {} texts",
                out.len(),
                batch.len()
            ))));
        }
        vectors.extend(out);
    }
    let entries = kb
        .iter()
        .map(|e| IndexEntry {
            entry_id: e.entry_id.clone(),
            instruction: e.instruction.clone(),
            app: e.app.clone(),
            vector: vectors[slot[e.instruction.as_str()]].clone(),
        })
        .collect();
    EmbeddingIndex::new(entries, embedder.dimension(), embedder.tag())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HashEmbedder, LookupEmbedder};
    use proptest::prelude::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn kb_entry(id: &str, instruction: &str, app: &str) -> KnowledgeEntry {
        KnowledgeEntry {
            entry_id: id.into(),
            instruction: instruction.into(),
            actions: vec!["TASK_COMPLETE[]".into()],
            descriptions: vec!["On Home Screen, complete task, done".into()],
            app: app.into(),
            source_task_id: id.into(),
        }
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&v(&[1., 2., 3.]), &v(&[1., 2., 3.])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v(&[1., 0.]), &v(&[0., 1.])).unwrap(), 0.0);
        assert!((cosine_similarity(&v(&[1., 1.]), &v(&[2., 2.])).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&v(&[1., 0.]), &v(&[1., 0., 0.])),
            Err(RetrievalError::DimensionMismatch(_))
        ));
        assert!(matches!(cosine_similarity(&v(&[0., 0.]), &v(&[1., 0.])), Err(RetrievalError::ZeroVector)));
    }

    #[test]
    fn build_preserves_order_and_dedupes() {
        let e = HashEmbedder::new(8).unwrap();
        let kb = vec![kb_entry("a", "open gmail", "Gmail"), kb_entry("b", "book hotel", "Booking"), kb_entry("c", "open gmail", "Gmail")];
        let index = build_index(&kb, &e).unwrap();
        assert_eq!(index.len(), 3);
        let ids: Vec<_> = index.entries().iter().map(|x| x.entry_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(index.entries()[0].vector, index.entries()[2].vector);
        assert_eq!(index.backend_tag(), "hash-v1:8");
        assert!(matches!(build_index(&[], &e), Err(RetrievalError::EmptyKnowledgeBase)));
        let dup = vec![kb_entry("a", "x", ""), kb_entry("a", "y", "")];
        assert!(matches!(build_index(&dup, &e), Err(RetrievalError::DuplicateEntry(_))));
    }

    #[test]
    fn identity_retrieval_and_threshold_boundary() {
        let e = HashEmbedder::new(16).unwrap();
        let kb = vec![kb_entry("a", "open gmail", ""), kb_entry("b", "book a hotel in rome", "")];
        let index = build_index(&kb, &e).unwrap();
        let hits = index.retrieve("book a hotel in rome", &e, &RetrieveOptions::new(1, 0.0)).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entry_id, "b");
        assert!((hits[0].score - 1.0).abs() < 1e-12);

        assert!(matches!(
            index.retrieve("x", &e, &RetrieveOptions::new(1, 1.0 + 1e-9)),
            Err(RetrievalError::InvalidParameter(_))
        ));
        assert!(matches!(
            index.retrieve("x", &e, &RetrieveOptions::new(0, 0.0)),
            Err(RetrievalError::InvalidParameter(_))
        ));
        let hits = index.retrieve("play some music", &e, &RetrieveOptions::new(2, 1.0)).unwrap();
        assert!(hits.is_empty());
    }

    #[test]
    fn ties_keep_insertion_order() {
        let lookup = LookupEmbedder::new(
            [
                ("p".to_string(), vec![1.0, 0.0]),
                ("q".to_string(), vec![2.0, 0.0]),
                ("r".to_string(), vec![0.0, 1.0]),
                ("query".to_string(), vec![1.0, 0.0]),
            ],
            2,
        )
        .unwrap();
        let kb = vec![kb_entry("r", "r", ""), kb_entry("p", "p", ""), kb_entry("q", "q", "")];
        let index = build_index(&kb, &lookup).unwrap();
        let hits = index.retrieve("query", &lookup, &RetrieveOptions::new(3, -1.0)).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.entry_id.as_str()).collect();
        assert_eq!(ids, ["p", "q", "r"]);
        let hits = index.retrieve("query", &lookup, &RetrieveOptions::new(1, 0.0)).unwrap();
        assert_eq!(hits[0].entry_id, "p");
    }

    #[test]
    fn app_filter_and_exclusion() {
        let e = HashEmbedder::new(16).unwrap();
        let kb = vec![kb_entry("a", "open inbox", "Gmail"), kb_entry("b", "open inbox", "Outlook")];
        let index = build_index(&kb, &e).unwrap();
        let mut opts = RetrieveOptions::new(2, 0.0);
        opts.app_filter = Some("Outlook".into());
        let hits = index.retrieve("open inbox", &e, &opts).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entry_id, "b");
        let mut opts = RetrieveOptions::new(2, 0.0);
        opts.exclude = vec!["a".into()];
        let hits = index.retrieve("open inbox", &e, &opts).unwrap();
        assert_eq!(hits.iter().map(|h| h.entry_id.as_str()).collect::<Vec<_>>(), ["b"]);
    }

    #[test]
    fn tag_mismatch_is_rejected() {
        let kb = vec![kb_entry("a", "x", "")];
        let index = build_index(&kb, &HashEmbedder::new(8).unwrap()).unwrap();
        assert!(matches!(
            index.retrieve("x", &HashEmbedder::new(16).unwrap(), &RetrieveOptions::default()),
            Err(RetrievalError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.index.jsonl");
        let e = HashEmbedder::new(4).unwrap();
        let index = build_index(&[kb_entry("a", "one", "X"), kb_entry("b", "two", "Y")], &e).unwrap();
        index.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"backend_tag\":\"hash-v1:4\""));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(EmbeddingIndex::load(&path).unwrap(), index);

        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(EmbeddingIndex::load(&path), Err(RetrievalError::Format(_))));
    }

    fn brute_force(index: &EmbeddingIndex, q: &EmbeddingVector, k: usize, tau: f64) -> Vec<String> {
        let mut scored: Vec<(usize, f64)> = index
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cosine_similarity(q, &e.vector).unwrap()))
            .filter(|(_, s)| *s >= tau)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|(i, _)| index.entries()[i].entry_id.clone()).collect()
    }

    fn arb_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-6))
    }

    fn index_of(vectors: Vec<Vec<f64>>) -> EmbeddingIndex {
        let dim = vectors[0].len();
        let entries = vectors
            .into_iter()
            .enumerate()
            .map(|(i, values)| IndexEntry {
                entry_id: format!("e{i}"),
                instruction: String::new(),
                app: String::new(),
                vector: EmbeddingVector::new(values).unwrap(),
            })
            .collect();
        EmbeddingIndex::new(entries, dim, "test").unwrap()
    }

    proptest! {
        #[test]
        fn matches_exhaustive_scan(
            vectors in prop::collection::vec(arb_vec(6), 1..200),
            q in arb_vec(6),
            k in 1usize..5,
            tau in -1.0f64..1.0,
        ) {
            let index = index_of(vectors);
            let q = EmbeddingVector::new(q).unwrap();
            let hits = index.retrieve_by_vector(&q, &RetrieveOptions::new(k, tau)).unwrap();
            let ids: Vec<String> = hits.iter().map(|h| h.entry_id.clone()).collect();
            prop_assert_eq!(ids, brute_force(&index, &q, k, tau));
            prop_assert!(hits.len() <= k);
            prop_assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert!(hits.iter().all(|h| h.score >= tau));
        }

        #[test]
        fn positive_scaling_keeps_ranking(
            vectors in prop::collection::vec(arb_vec(5), 1..100),
            q in arb_vec(5),
            c in 0.001f64..1000.0,
        ) {
            let index = index_of(vectors);
            let q = EmbeddingVector::new(q).unwrap();
            let opts = RetrieveOptions::new(3, -1.0);
            let a: Vec<String> = index.retrieve_by_vector(&q, &opts).unwrap().into_iter().map(|h| h.entry_id).collect();
            let b: Vec<String> = index.retrieve_by_vector(&q.scaled(c).unwrap(), &opts).unwrap().into_iter().map(|h| h.entry_id).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(u in arb_vec(4), w in arb_vec(4)) {
            let (u, w) = (EmbeddingVector::new(u).unwrap(), EmbeddingVector::new(w).unwrap());
            let a = cosine_similarity(&u, &w).unwrap();
            prop_assert_eq!(a, cosine_similarity(&w, &u).unwrap());
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
