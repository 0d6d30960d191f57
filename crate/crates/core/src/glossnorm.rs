//! SignStream-style gloss tokens, normalization and pair filtering.

use serde::{Deserialize, Serialize};

use crate::text::{words, TrigramTfidf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Lexical,
    Pointer,
    Possessive,
    Reflexive,
    Fingerspell,
    Loan,
    Name,
    NameFingerspell,
    Classifier,
    Annotative,
    Meta,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlossToken {
    /// Full surface form, locus suffix included.
    pub surface: String,
    pub kind: TokenKind,
    pub locus: Option<String>,
}

impl GlossToken {
    /// Surface without the locus suffix.
    pub fn base(&self) -> &str {
        match &self.locus {
            Some(l) => &self.surface[..self.surface.len() - l.len() - 1],
            None => &self.surface,
        }
    }
}

pub const PERSON_CODES: [&str; 5] = ["1p", "2p", "3p", "loc", "honorific"];
pub const META_TOKENS: [&str; 2] = ["NEXT-TOPIC", "CURRENT-TOPIC"];

/// Classifier families matched as a prefix followed by nothing or by one of
/// the variant separators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierGrammar {
    pub families: Vec<String>,
    pub separators: Vec<char>,
}

impl Default for ClassifierGrammar {
    fn default() -> Self {
        Self {
            families: ["DCL", "TCL", "PCL", "SCL", "BCL"]
                .map(String::from)
                .to_vec(),
            separators: vec!['"', ':', '-', '(', '\'', '_', '.', '/'],
        }
    }
}

impl ClassifierGrammar {
    pub fn matches(&self, s: &str) -> bool {
        self.families.iter().any(|f| {
            s.strip_prefix(f.as_str()).is_some_and(|rest| {
                rest.is_empty() || rest.starts_with(|c| self.separators.contains(&c))
            })
        })
    }
}

fn indexed_kind(body: &str) -> Option<(TokenKind, &str)> {
    for (prefix, kind) in [
        ("IX-", TokenKind::Pointer),
        ("POSS-", TokenKind::Possessive),
        ("SELF-", TokenKind::Reflexive),
    ] {
        if let Some(rest) = body.strip_prefix(prefix) {
            return Some((kind, rest));
        }
    }
    None
}

pub fn classify(surface: &str, grammar: &ClassifierGrammar) -> (TokenKind, Option<String>) {
    if META_TOKENS.contains(&surface) {
        return (TokenKind::Meta, None);
    }
    if grammar.matches(surface) {
        return (TokenKind::Classifier, None);
    }
    if surface.contains('"') || (surface.starts_with('[') && surface.ends_with(']')) {
        return (TokenKind::Annotative, None);
    }
    if surface.starts_with("ns-fs-") {
        return (TokenKind::NameFingerspell, None);
    }
    if surface.starts_with("ns-") {
        return (TokenKind::Name, None);
    }
    if surface.starts_with("fs-") {
        return (TokenKind::Fingerspell, None);
    }
    if surface.starts_with('#') && surface.len() > 1 {
        return (TokenKind::Loan, None);
    }
    let (body, locus) = match surface.split_once(':') {
        Some((b, l)) if !b.is_empty() && !l.is_empty() => (b, Some(l)),
        _ => (surface, None),
    };
    if let Some((kind, code)) = indexed_kind(body) {
        if PERSON_CODES.contains(&code) {
            return (kind, locus.map(String::from));
        }
    }
    (TokenKind::Lexical, None)
}

pub fn tokenize(line: &str) -> Vec<GlossToken> {
    tokenize_with(line, &ClassifierGrammar::default())
}

pub fn tokenize_with(line: &str, grammar: &ClassifierGrammar) -> Vec<GlossToken> {
    line.split_whitespace()
        .map(|s| {
            let (kind, locus) = classify(s, grammar);
            GlossToken {
                surface: s.to_string(),
                kind,
                locus,
            }
        })
        .collect()
}

pub fn detokenize(tokens: &[GlossToken]) -> String {
    tokens
        .iter()
        .map(|t| t.surface.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Drops annotative, classifier and meta tokens and strips locus suffixes.
pub fn normalize(tokens: &[GlossToken]) -> Vec<GlossToken> {
    tokens
        .iter()
        .filter(|t| {
            !matches!(
                t.kind,
                TokenKind::Annotative | TokenKind::Classifier | TokenKind::Meta
            )
        })
        .map(|t| GlossToken {
            surface: t.base().to_string(),
            kind: t.kind,
            locus: None,
        })
        .collect()
}

pub fn normalize_line(line: &str) -> String {
    detokenize(&normalize(&tokenize(line)))
}

/// Fingerspelled forms become one lexical token of their letters, for
/// evaluation.
pub fn collapse_fingerspell(tokens: &[GlossToken]) -> Vec<GlossToken> {
    tokens
        .iter()
        .map(|t| {
            let rest = match t.kind {
                TokenKind::NameFingerspell => &t.surface["ns-fs-".len()..],
                TokenKind::Fingerspell => &t.surface["fs-".len()..],
                _ => return t.clone(),
            };
            GlossToken {
                surface: rest.replace('-', ""),
                kind: TokenKind::Lexical,
                locus: None,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterReason {
    Empty,
    LengthRatio,
    Similarity,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Keep,
    Discard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub decision: Decision,
    pub reasons: Vec<FilterReason>,
    pub similarity: f64,
}

impl FilterReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub max_words: usize,
    pub min_gloss: usize,
    pub similarity_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_words: 20,
            min_gloss: 3,
            similarity_threshold: 0.05,
        }
    }
}

/// External keep/discard judgment, e.g. an LLM consistency check.
pub trait SemanticJudge: Send + Sync {
    fn keep(&self, english: &str, gloss: &[GlossToken]) -> bool;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct KeepAll;

impl SemanticJudge for KeepAll {
    fn keep(&self, _: &str, _: &[GlossToken]) -> bool {
        true
    }
}

/// Applies every rule and records all that fire. `tfidf` provides the IDF
/// statistics; when `None` they are fitted on the pair itself.
pub fn filter_pair(
    english: &str,
    gloss: &[GlossToken],
    cfg: &FilterConfig,
    tfidf: Option<&TrigramTfidf>,
    judge: &dyn SemanticJudge,
) -> FilterReport {
    let mut reasons = Vec::new();
    let surface = detokenize(gloss);
    if gloss.is_empty() || english.trim().is_empty() {
        reasons.push(FilterReason::Empty);
    }
    if words(english).len() > cfg.max_words && gloss.len() <= cfg.min_gloss {
        reasons.push(FilterReason::LengthRatio);
    }
    let local;
    let model = match tfidf {
        Some(m) => m,
        None => {
            local = TrigramTfidf::fit([english, surface.as_str()]);
            &local
        }
    };
    let similarity = model.similarity(english, &surface);
    if similarity < cfg.similarity_threshold {
        reasons.push(FilterReason::Similarity);
    }
    if !judge.keep(english, gloss) {
        reasons.push(FilterReason::External);
    }
    FilterReport {
        id: None,
        decision: if reasons.is_empty() {
            Decision::Keep
        } else {
            Decision::Discard
        },
        reasons,
        similarity,
    }
}
