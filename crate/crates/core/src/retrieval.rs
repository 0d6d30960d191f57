//! Translation-memory retrieval and the retrieval-based semantic evaluator.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::token_f1;
use crate::motion::{MotionSequence, PartLayout};
use crate::text::{words, SparseVec, TrigramTfidf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityLabel {
    Person,
    Org,
    Gpe,
    Loc,
    Fac,
    Norp,
}

impl EntityLabel {
    pub fn placeholder(self) -> &'static str {
        match self {
            Self::Person => "someone",
            Self::Org => "some organization",
            Self::Gpe | Self::Loc => "some place",
            Self::Fac => "some facility",
            Self::Norp => "some group",
        }
    }
}

/// Byte range `[start, end)` in the source text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: EntityLabel,
}

/// Keeps the longest of any overlapping spans (earlier start on equal
/// length) and substitutes placeholders right to left.
pub fn anonymize(text: &str, spans: &[EntitySpan]) -> String {
    let mut cand: Vec<EntitySpan> = spans
        .iter()
        .copied()
        .filter(|s| {
            s.start < s.end
                && s.end <= text.len()
                && text.is_char_boundary(s.start)
                && text.is_char_boundary(s.end)
        })
        .collect();
    cand.sort_by(|a, b| {
        (b.end - b.start)
            .cmp(&(a.end - a.start))
            .then(a.start.cmp(&b.start))
    });
    let mut kept: Vec<EntitySpan> = Vec::new();
    for s in cand {
        if kept.iter().all(|k| s.end <= k.start || s.start >= k.end) {
            kept.push(s);
        }
    }
    kept.sort_by_key(|s| std::cmp::Reverse(s.start));
    let mut out = text.to_string();
    for s in kept {
        out.replace_range(s.start..s.end, s.label.placeholder());
    }
    out
}

pub trait NerProvider: Send + Sync {
    fn entities(&self, text: &str) -> Vec<EntitySpan>;
}

/// Whole-word, case-sensitive phrase lookup.
#[derive(Clone, Debug, Default)]
pub struct Gazetteer {
    pub entries: Vec<(String, EntityLabel)>,
}

impl NerProvider for Gazetteer {
    fn entities(&self, text: &str) -> Vec<EntitySpan> {
        let boundary = |i: usize, before: bool| {
            let c = if before {
                text[..i].chars().next_back()
            } else {
                text[i..].chars().next()
            };
            c.is_none_or(|c| !c.is_alphanumeric())
        };
        let mut out = Vec::new();
        for (phrase, label) in &self.entries {
            if phrase.is_empty() {
                continue;
            }
            for (start, _) in text.match_indices(phrase.as_str()) {
                let end = start + phrase.len();
                if boundary(start, true) && boundary(end, false) {
                    out.push(EntitySpan {
                        start,
                        end,
                        label: *label,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub english: String,
    pub gloss: String,
    pub id: String,
}

pub fn read_corpus(r: impl BufRead) -> Result<Vec<Document>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Document = serde_json::from_str(&line)
            .map_err(|e| CoreError::Format(format!("corpus line {}: {e}", i + 1)))?;
        out.push(d);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    read_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_corpus(w: &mut impl Write, docs: &[Document]) -> Result<()> {
    for d in docs {
        writeln!(w, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

pub const BM25_K1: f64 = 1.5;
pub const BM25_B: f64 = 0.75;

#[derive(Clone, Debug)]
pub struct Bm25Index {
    docs: Vec<HashMap<String, usize>>,
    lens: Vec<usize>,
    df: HashMap<String, usize>,
    avgdl: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn new(docs: &[Vec<String>]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut tfs = Vec::with_capacity(docs.len());
        for d in docs {
            let mut tf: HashMap<String, usize> = HashMap::new();
            for w in d {
                *tf.entry(w.clone()).or_default() += 1;
            }
            for w in tf.keys() {
                *df.entry(w.clone()).or_default() += 1;
            }
            tfs.push(tf);
        }
        let lens: Vec<usize> = docs.iter().map(Vec::len).collect();
        let avgdl = if docs.is_empty() {
            0.0
        } else {
            lens.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        Self {
            docs: tfs,
            lens,
            df,
            avgdl,
            k1: BM25_K1,
            b: BM25_B,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// `ln((N − df + 0.5)/(df + 0.5) + 1)`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn score(&self, query: &[String], doc: usize) -> f64 {
        let tf = &self.docs[doc];
        let norm = if self.avgdl > 0.0 {
            self.lens[doc] as f64 / self.avgdl
        } else {
            0.0
        };
        query
            .iter()
            .filter_map(|q| tf.get(q).map(|&f| (q, f as f64)))
            .map(|(q, f)| {
                self.idf(q) * f * (self.k1 + 1.0) / (f + self.k1 * (1.0 - self.b + self.b * norm))
            })
            .sum()
    }

    pub fn score_all(&self, query: &[String]) -> Vec<f64> {
        (0..self.docs.len()).map(|d| self.score(query, d)).collect()
    }
}

/// Learned sparse retrieval stand-in.
pub trait SparseScorer: Send + Sync {
    fn score_all(&self, query: &str) -> Vec<f64>;
}

/// Character-trigram TF-IDF dot products against precomputed document vectors.
pub struct TrigramSparse {
    model: TrigramTfidf,
    vectors: Vec<SparseVec>,
}

impl TrigramSparse {
    pub fn new(docs: &[String]) -> Self {
        let model = TrigramTfidf::fit(docs.iter().map(String::as_str));
        let vectors = docs.iter().map(|d| model.vector(d)).collect();
        Self { model, vectors }
    }
}

impl SparseScorer for TrigramSparse {
    fn score_all(&self, query: &str) -> Vec<f64> {
        let q = self.model.vector(query);
        self.vectors
            .iter()
            .map(|v| q.iter().filter_map(|(k, a)| v.get(k).map(|b| a * b)).sum())
            .collect()
    }
}

pub trait Reranker: Send + Sync {
    fn score(&self, query: &str, doc: &str) -> f64;
}

/// Dice coefficient over lowercased word sets.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenOverlap;

impl Reranker for TokenOverlap {
    fn score(&self, query: &str, doc: &str) -> f64 {
        let q: HashSet<String> = words(query).into_iter().collect();
        let d: HashSet<String> = words(doc).into_iter().collect();
        if q.is_empty() && d.is_empty() {
            return 0.0;
        }
        2.0 * q.intersection(&d).count() as f64 / (q.len() + d.len()) as f64
    }
}

/// Maps onto `[0, 1]`; a constant pool maps to 1.
pub fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![1.0; xs.len()];
    }
    xs.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub alpha: f64,
    pub k_first: usize,
    pub k_out: usize,
    pub rerank_weight: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.35,
            k_first: 30,
            k_out: 6,
            rerank_weight: 0.85,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub doc: usize,
    pub s_bm25: f64,
    pub s_sparse: f64,
    pub s_first: f64,
    pub s_rerank: f64,
    pub s_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<RetrievalScores>,
    /// Fewer than `k_out` distinct candidates were available.
    pub short: bool,
}

pub fn normalize_english(s: &str) -> String {
    words(s).join(" ")
}

fn by_score_desc(a: (f64, usize), b: (f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Fusion, rerank and dedup given raw first-stage scores over the pool.
/// `keys` are the dedup keys (normalized English) per document.
pub fn rank_candidates(
    bm25: &[f64],
    sparse: &[f64],
    rerank: impl Fn(usize) -> f64,
    keys: &[String],
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult> {
    if bm25.len() != sparse.len() || bm25.len() != keys.len() {
        return Err(CoreError::Dimension(
            "score vectors differ in length".into(),
        ));
    }
    let (nb, ns) = (min_max(bm25), min_max(sparse));
    let first: Vec<f64> = nb
        .iter()
        .zip(&ns)
        .map(|(b, s)| cfg.alpha * b + (1.0 - cfg.alpha) * s)
        .collect();
    let mut order: Vec<usize> = (0..bm25.len()).collect();
    order.sort_by(|&a, &b| by_score_desc((first[a], a), (first[b], b)));
    order.truncate(cfg.k_first);
    let mut scored: Vec<RetrievalScores> = order
        .into_iter()
        .map(|d| {
            let r = rerank(d);
            RetrievalScores {
                doc: d,
                s_bm25: bm25[d],
                s_sparse: sparse[d],
                s_first: first[d],
                s_rerank: r,
                s_final: cfg.rerank_weight * r + (1.0 - cfg.rerank_weight) * first[d],
            }
        })
        .collect();
    scored.sort_by(|a, b| by_score_desc((a.s_final, a.doc), (b.s_final, b.doc)));
    let mut seen = HashSet::new();
    let hits: Vec<RetrievalScores> = scored
        .into_iter()
        .filter(|s| seen.insert(keys[s.doc].clone()))
        .take(cfg.k_out)
        .collect();
    Ok(RetrievalResult {
        short: hits.len() < cfg.k_out,
        hits,
    })
}

/// Anonymized BM25 + sparse index over a translation memory.
pub struct Retriever<'a> {
    pub docs: &'a [Document],
    anon: Vec<String>,
    keys: Vec<String>,
    bm25: Bm25Index,
    sparse: Box<dyn SparseScorer + 'a>,
    reranker: Box<dyn Reranker + 'a>,
    ner: Box<dyn NerProvider + 'a>,
    pub cfg: RetrievalConfig,
}

impl<'a> Retriever<'a> {
    /// Uses the trigram sparse scorer, the overlap reranker and `ner`.
    pub fn with_stubs(
        docs: &'a [Document],
        ner: Box<dyn NerProvider + 'a>,
        cfg: RetrievalConfig,
    ) -> Self {
        let anon: Vec<String> = docs
            .iter()
            .map(|d| anonymize(&d.english, &ner.entities(&d.english)))
            .collect();
        let sparse = Box::new(TrigramSparse::new(&anon));
        Self::build(docs, anon, sparse, Box::new(TokenOverlap), ner, cfg)
    }

    pub fn build(
        docs: &'a [Document],
        anon: Vec<String>,
        sparse: Box<dyn SparseScorer + 'a>,
        reranker: Box<dyn Reranker + 'a>,
        ner: Box<dyn NerProvider + 'a>,
        cfg: RetrievalConfig,
    ) -> Self {
        let tokens: Vec<Vec<String>> = anon.iter().map(|a| words(a)).collect();
        let keys = docs.iter().map(|d| normalize_english(&d.english)).collect();
        Self {
            docs,
            bm25: Bm25Index::new(&tokens),
            anon,
            keys,
            sparse,
            reranker,
            ner,
            cfg,
        }
    }

    pub fn anonymized(&self, doc: usize) -> &str {
        &self.anon[doc]
    }

    pub fn retrieve(&self, query: &str) -> Result<RetrievalResult> {
        if self.docs.is_empty() {
            return Err(CoreError::Empty("retrieval corpus"));
        }
        let q = anonymize(query, &self.ner.entities(query));
        let bm = self.bm25.score_all(&words(&q));
        let sp = self.sparse.score_all(&q);
        rank_candidates(
            &bm,
            &sp,
            |d| self.reranker.score(&q, &self.anon[d]),
            &self.keys,
            &self.cfg,
        )
    }
}

/// Maps a motion to a unit vector.
pub trait MotionEncoder: Send + Sync {
    fn encode(&self, x: &MotionSequence) -> Vec<f64>;
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
    v
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-part temporal mean and standard deviation, each part block scaled to
/// unit norm, then the whole vector normalized.
#[derive(Clone, Debug)]
pub struct StatsEncoder {
    pub layout: PartLayout,
}

impl MotionEncoder for StatsEncoder {
    fn encode(&self, x: &MotionSequence) -> Vec<f64> {
        let t = x.len().max(1) as f64;
        let mut out = Vec::new();
        for (_, r) in self.layout.ranges() {
            let mut mean = vec![0.0; r.len()];
            let mut sq = vec![0.0; r.len()];
            for i in 0..x.len() {
                for (j, &v) in x.frame(i)[r.clone()].iter().enumerate() {
                    mean[j] += v / t;
                    sq[j] += v * v / t;
                }
            }
            let std: Vec<f64> = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q - m * m).max(0.0).sqrt())
                .collect();
            out.extend(unit(mean));
            out.extend(unit(std));
        }
        unit(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceItem {
    pub id: String,
    pub english: String,
    pub gloss: Vec<String>,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlossPrototype {
    pub gloss: String,
    pub embedding: Vec<f64>,
}

/// One unit vector per gloss: the renormalized mean of its clips' encodings.
pub fn build_prototypes<'m>(
    clips: impl IntoIterator<Item = (&'m str, &'m MotionSequence)>,
    encoder: &dyn MotionEncoder,
) -> Vec<GlossPrototype> {
    let mut acc: indexmap::IndexMap<String, (Vec<f64>, usize)> = indexmap::IndexMap::new();
    for (g, m) in clips {
        let e = encoder.encode(m);
        let slot = acc
            .entry(g.to_string())
            .or_insert_with(|| (vec![0.0; e.len()], 0));
        slot.0.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
        slot.1 += 1;
    }
    acc.into_iter()
        .map(|(gloss, (sum, _))| GlossPrototype {
            gloss,
            embedding: unit(sum),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticEvalConfig {
    pub lambda_u: f64,
    pub lambda_g: f64,
    pub lambda_c: f64,
    pub top_k: usize,
}

impl Default for SemanticEvalConfig {
    fn default() -> Self {
        Self {
            lambda_u: 0.55,
            lambda_g: 0.40,
            lambda_c: 0.05,
            top_k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub item: usize,
    pub s_u: f64,
    pub s_u_norm: f64,
    pub gloss_evidence: Vec<String>,
    pub f1: f64,
    pub c_w: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEvalResult {
    /// Top-k candidates by hybrid score, best first.
    pub candidates: Vec<CandidateScore>,
    /// Full memory order: reranked top-k followed by the rest by `s_U`.
    pub ranking: Vec<usize>,
}

impl SemanticEvalResult {
    pub fn best(&self) -> &CandidateScore {
        &self.candidates[0]
    }

    /// 1-based rank of `id` in the final ordering.
    pub fn rank_of(&self, memory: &[SentenceItem], id: &str) -> Option<usize> {
        self.ranking
            .iter()
            .position(|&i| memory[i].id == id)
            .map(|p| p + 1)
    }
}

/// `K` contiguous, nonempty-when-possible frame ranges of near-equal length.
pub fn equal_segments(t: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .map(|i| {
            let s = i * t / k;
            let e = ((i + 1) * t / k).max(s + 1).min(t.max(1));
            (s.min(t.saturating_sub(1)), e)
        })
        .collect()
}

/// Nearest prototype per segment and the mean best-match cosine.
pub fn gloss_evidence(
    x: &MotionSequence,
    k: usize,
    prototypes: &[GlossPrototype],
    encoder: &dyn MotionEncoder,
) -> Result<(Vec<String>, f64)> {
    if prototypes.is_empty() {
        return Err(CoreError::Empty("gloss memory"));
    }
    if k == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let mut evidence = Vec::with_capacity(k);
    let mut conf = 0.0;
    for (s, e) in equal_segments(x.len(), k) {
        let emb = encoder.encode(&x.slice(s, e)?);
        let (best, sim) = prototypes
            .iter()
            .map(|p| dot(&emb, &p.embedding))
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );
        evidence.push(prototypes[best].gloss.clone());
        conf += sim;
    }
    Ok((evidence, conf / k as f64))
}

pub fn semantic_eval(
    x: &MotionSequence,
    memory: &[SentenceItem],
    prototypes: &[GlossPrototype],
    encoder: &dyn MotionEncoder,
    cfg: &SemanticEvalConfig,
) -> Result<SemanticEvalResult> {
    if memory.is_empty() {
        return Err(CoreError::Empty("sentence memory"));
    }
    if prototypes.is_empty() {
        return Err(CoreError::Empty("gloss memory"));
    }
    let q = encoder.encode(x);
    let s_u: Vec<f64> = memory.iter().map(|m| dot(&q, &m.embedding)).collect();
    let mut order: Vec<usize> = (0..memory.len()).collect();
    order.sort_by(|&a, &b| by_score_desc((s_u[a], a), (s_u[b], b)));
    let k = cfg.top_k.clamp(1, memory.len());
    let top = &order[..k];
    let norm = min_max(&top.iter().map(|&i| s_u[i]).collect::<Vec<_>>());
    let mut evidence_cache: HashMap<usize, (Vec<String>, f64)> = HashMap::new();
    let mut candidates = Vec::with_capacity(k);
    for (&i, &su_n) in top.iter().zip(&norm) {
        let kk = memory[i].gloss.len();
        if let std::collections::hash_map::Entry::Vacant(e) = evidence_cache.entry(kk) {
            e.insert(gloss_evidence(x, kk, prototypes, encoder)?);
        }
        let (ev, c_w) = evidence_cache[&kk].clone();
        let f1 = token_f1(&ev, &memory[i].gloss);
        candidates.push(CandidateScore {
            item: i,
            s_u: s_u[i],
            s_u_norm: su_n,
            gloss_evidence: ev,
            f1,
            c_w,
            score: cfg.lambda_u * su_n + cfg.lambda_g * f1 + cfg.lambda_c * c_w,
        });
    }
    candidates.sort_by(|a, b| by_score_desc((a.score, a.item), (b.score, b.item)));
    let mut ranking: Vec<usize> = candidates.iter().map(|c| c.item).collect();
    ranking.extend_from_slice(&order[k..]);
    Ok(SemanticEvalResult {
        candidates,
        ranking,
    })
}
