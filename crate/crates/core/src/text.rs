//! Character n-gram TF-IDF vectors and word tokenization shared by filters,
//! retrieval and the text metrics.

use std::collections::HashMap;

/// Lowercased alphanumeric word tokens.
pub fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Character trigrams of the lowercased, space-padded, whitespace-collapsed text.
pub fn char_ngrams(s: &str, n: usize) -> Vec<String> {
    let norm: String = s
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    if norm.is_empty() {
        return Vec::new();
    }
    let chars: Vec<char> = format!(" {norm} ").chars().collect();
    if chars.len() < n {
        return vec![chars.iter().collect()];
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

pub type SparseVec = HashMap<String, f64>;

pub fn cosine(a: &SparseVec, b: &SparseVec) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .iter()
        .filter_map(|(k, v)| large.get(k).map(|w| v * w))
        .sum();
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Character trigram TF-IDF with smoothed IDF `ln((1+N)/(1+df)) + 1`.
#[derive(Clone, Debug, Default)]
pub struct TrigramTfidf {
    df: HashMap<String, usize>,
    n_docs: usize,
}

impl TrigramTfidf {
    pub fn fit<'a>(docs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n_docs = 0;
        for d in docs {
            n_docs += 1;
            let mut grams = char_ngrams(d, 3);
            grams.sort();
            grams.dedup();
            for g in grams {
                *df.entry(g).or_default() += 1;
            }
        }
        Self { df, n_docs }
    }

    pub fn idf(&self, gram: &str) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0);
        ((1.0 + self.n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
    }

    pub fn vector(&self, s: &str) -> SparseVec {
        let mut tf: SparseVec = HashMap::new();
        for g in char_ngrams(s, 3) {
            *tf.entry(g).or_default() += 1.0;
        }
        for (g, v) in tf.iter_mut() {
            *v *= self.idf(g);
        }
        tf
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        cosine(&self.vector(a), &self.vector(b))
    }
}
