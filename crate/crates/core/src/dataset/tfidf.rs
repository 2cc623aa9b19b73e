//! Sparse TF-IDF with smoothed idf.
//!
//! tf is the raw count of a token in a document, idf is
//! `ln((1 + N) / (1 + df)) + 1`, and documents compare by cosine.

use std::collections::HashMap;

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfModel {
    documents: usize,
    df: HashMap<String, usize>,
}

pub type SparseVector = HashMap<String, f64>;

impl TfIdfModel {
    pub fn fit<S: AsRef<str>>(docs: &[S]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let mut tokens = tokenize(doc.as_ref());
            tokens.sort();
            tokens.dedup();
            for token in tokens {
                *df.entry(token).or_insert(0) += 1;
            }
        }
        Self {
            documents: docs.len(),
            df,
        }
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0) as f64;
        ((1.0 + self.documents as f64) / (1.0 + df)).ln() + 1.0
    }

    pub fn vectorize(&self, doc: &str) -> SparseVector {
        let mut counts: HashMap<String, f64> = HashMap::new();
        for token in tokenize(doc) {
            *counts.entry(token).or_insert(0.0) += 1.0;
        }
        counts
            .into_iter()
            .map(|(token, tf)| {
                let w = tf * self.idf(&token);
                (token, w)
            })
            .collect()
    }
}

/// Cosine of two non-negative sparse vectors; 0 when either is empty.
pub fn sparse_cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut keys: Vec<&String> = small.keys().collect();
    keys.sort();
    let dot: f64 = keys
        .into_iter()
        .filter_map(|k| large.get(k).map(|w| small[k] * w))
        .sum();
    let norm = |v: &SparseVector| {
        let mut w: Vec<f64> = v.values().copied().collect();
        w.sort_by(f64::total_cmp);
        w.iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}
