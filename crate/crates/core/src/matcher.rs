//! Candidate pair ranking.
//!
//! Every API is scored against every other by the larger of two cosine
//! similarities: one over TF-IDF embeddings of its signature subwords, one
//! over embeddings of its one-sentence description. The K best partners per
//! source become candidates, plus every pair backed by a doc template.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ApiEntry, CorpusDb};
use crate::synthesizer::template::{extract_templates, MatchingTemplate};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("failed to read embeddings {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embeddings file is not a JSON map of float vectors: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("embedding for {api} has length {found}, expected {expected}")]
    Length { api: String, found: usize, expected: usize },
    #[error("embedding for {0} contains a non-finite value")]
    NonFinite(String),
}

/// Token post-processing hook (stemming and the like).
pub trait TokenNormalizer: Send + Sync {
    fn normalize(&self, token: &str) -> String;
}

/// Lowercases and nothing else.
#[derive(Debug, Clone, Copy, Default)]
pub struct Lowercase;

impl TokenNormalizer for Lowercase {
    fn normalize(&self, token: &str) -> String {
        token.to_lowercase()
    }
}

/// Splits free text into subwords.
///
/// Boundaries: any non-alphanumeric character (so `.` and `_`), a lowercase
/// letter followed by an uppercase one, the last capital of an acronym run
/// followed by lowercase (`HTTPServer` -> `HTTP`, `Server`), and a letter
/// followed by a digit. A digit followed by a letter stays joined, so `3d`
/// survives as one token.
pub fn split_subwords(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for run in text.split(|c: char| !c.is_alphanumeric()) {
        if run.is_empty() {
            continue;
        }
        let chars: Vec<char> = run.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let (prev, cur) = (chars[i - 1], chars[i]);
            let next = chars.get(i + 1).copied();
            let boundary = (prev.is_lowercase() && cur.is_uppercase())
                || (prev.is_uppercase() && cur.is_uppercase() && next.is_some_and(char::is_lowercase))
                || (prev.is_alphabetic() && cur.is_ascii_digit());
            if boundary {
                out.push(chars[start..i].iter().collect());
                start = i;
            }
        }
        out.push(chars[start..].iter().collect());
    }
    out
}

/// Signature subwords: the qualified name followed by each argument name.
pub fn tokenize(entry: &ApiEntry) -> Vec<String> {
    tokenize_with(entry, &Lowercase)
}

pub fn tokenize_with(entry: &ApiEntry, normalizer: &dyn TokenNormalizer) -> Vec<String> {
    std::iter::once(entry.name.as_str())
        .chain(entry.args.iter().map(|a| a.name.as_str()))
        .flat_map(split_subwords)
        .map(|t| normalizer.normalize(&t))
        .filter(|t| !t.is_empty())
        .collect()
}

/// Sparse non-negative embedding keyed by vocabulary index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TfIdfVector(pub BTreeMap<usize, f64>);

impl TfIdfVector {
    pub fn is_zero(&self) -> bool {
        self.0.values().all(|w| *w == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &TfIdfVector) -> f64 {
        // iterate the shorter map
        let (small, large) = if self.0.len() <= other.0.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.0.iter().filter_map(|(k, w)| large.0.get(k).map(|v| w * v)).sum()
    }

    pub fn cosine(&self, other: &TfIdfVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return 0.0;
        }
        clamp_unit(self.dot(other) / denom)
    }
}

/// Raw counts divided by each token's corpus-wide count.
pub fn tfidf_embed(all_tokens: &BTreeMap<String, Vec<String>>) -> BTreeMap<String, TfIdfVector> {
    let vocab: BTreeMap<&str, usize> = all_tokens
        .values()
        .flatten()
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, i))
        .collect();
    let mut totals = vec![0usize; vocab.len()];
    let counts: BTreeMap<&String, BTreeMap<usize, usize>> = all_tokens
        .iter()
        .map(|(name, tokens)| {
            let mut c = BTreeMap::new();
            for t in tokens {
                let idx = vocab[t.as_str()];
                *c.entry(idx).or_insert(0) += 1;
                totals[idx] += 1;
            }
            (name, c)
        })
        .collect();
    counts
        .into_iter()
        .map(|(name, c)| {
            let v = c
                .into_iter()
                .map(|(idx, n)| (idx, n as f64 / totals[idx] as f64))
                .collect();
            (name.clone(), TfIdfVector(v))
        })
        .collect()
}

/// Cosine of two dense vectors; 0 when either has zero norm.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    clamp_unit(dot / (nx * ny))
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Description embeddings keyed by API name, all of one length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrecomputedEmbeddings {
    vectors: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Result<Self, EmbeddingError> {
        let mut expected = None;
        for (api, v) in &vectors {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EmbeddingError::NonFinite(api.clone()));
            }
            match expected {
                None => expected = Some(v.len()),
                Some(n) if n != v.len() => {
                    return Err(EmbeddingError::Length {
                        api: api.clone(),
                        found: v.len(),
                        expected: n,
                    })
                }
                _ => {}
            }
        }
        Ok(Self { vectors })
    }

    pub fn from_json(text: &str) -> Result<Self, EmbeddingError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn get(&self, api: &str) -> Option<&[f64]> {
        self.vectors.get(api).map(Vec::as_slice)
    }
}

/// Source of description embeddings.
#[derive(Debug, Clone, Default)]
pub enum DocEmbedder {
    /// TF-IDF over description subwords, weighted like the signature channel.
    #[default]
    TfIdf,
    Precomputed(PrecomputedEmbeddings),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Signature,
    Document,
    Template,
}

/// A source/target pair proposed for verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub source: String,
    pub target: String,
    /// `max(signature, document)` similarity.
    pub score: f64,
    pub channel: Channel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<MatchingTemplate>,
}

/// Pairwise similarity oracle over a fixed corpus snapshot.
pub struct Matcher<'a> {
    db: &'a CorpusDb,
    signature: BTreeMap<String, TfIdfVector>,
    document: DocVectors,
}

enum DocVectors {
    TfIdf(BTreeMap<String, TfIdfVector>),
    Precomputed(PrecomputedEmbeddings),
}

impl<'a> Matcher<'a> {
    pub fn new(db: &'a CorpusDb, embedder: DocEmbedder) -> Self {
        Self::with_normalizer(db, embedder, &Lowercase)
    }

    pub fn with_normalizer(db: &'a CorpusDb, embedder: DocEmbedder, normalizer: &dyn TokenNormalizer) -> Self {
        let sig_tokens: BTreeMap<String, Vec<String>> = db
            .entries()
            .map(|e| (e.name.clone(), tokenize_with(e, normalizer)))
            .collect();
        let signature = tfidf_embed(&sig_tokens);
        let document = match embedder {
            DocEmbedder::TfIdf => {
                let doc_tokens: BTreeMap<String, Vec<String>> = db
                    .entries()
                    .map(|e| {
                        let toks = split_subwords(&e.description)
                            .into_iter()
                            .map(|t| normalizer.normalize(&t))
                            .filter(|t| !t.is_empty())
                            .collect();
                        (e.name.clone(), toks)
                    })
                    .collect();
                DocVectors::TfIdf(tfidf_embed(&doc_tokens))
            }
            DocEmbedder::Precomputed(p) => {
                for name in db.names().filter(|n| p.get(n).is_none()) {
                    log::warn!("no precomputed embedding for {name}; its document similarity is 0");
                }
                DocVectors::Precomputed(p)
            }
        };
        Self {
            db,
            signature,
            document,
        }
    }

    pub fn signature_vector(&self, api: &str) -> Option<&TfIdfVector> {
        self.signature.get(api)
    }

    pub fn sim_signature(&self, s: &str, t: &str) -> f64 {
        match (self.signature.get(s), self.signature.get(t)) {
            (Some(a), Some(b)) => a.cosine(b),
            _ => 0.0,
        }
    }

    pub fn sim_document(&self, s: &str, t: &str) -> f64 {
        match &self.document {
            DocVectors::TfIdf(vectors) => match (vectors.get(s), vectors.get(t)) {
                (Some(a), Some(b)) => a.cosine(b),
                _ => 0.0,
            },
            DocVectors::Precomputed(p) => match (p.get(s), p.get(t)) {
                (Some(a), Some(b)) => cosine(a, b),
                _ => 0.0,
            },
        }
    }

    /// `max(sig, doc)` and the channel that attains it (signature on ties).
    pub fn sim_api(&self, s: &str, t: &str) -> (f64, Channel) {
        let sig = self.sim_signature(s, t);
        let doc = self.sim_document(s, t);
        if doc > sig {
            (doc, Channel::Document)
        } else {
            (sig, Channel::Signature)
        }
    }

    /// The `k` best partners of `source`, best first, ties by target name.
    pub fn ranked_for(&self, source: &str, k: usize) -> Vec<CandidatePair> {
        let mut scored: Vec<CandidatePair> = self
            .db
            .names()
            .filter(|t| *t != source)
            .map(|t| {
                let (score, channel) = self.sim_api(source, t);
                CandidatePair {
                    source: source.to_string(),
                    target: t.to_string(),
                    score,
                    channel,
                    template: None,
                }
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.target.cmp(&b.target)));
        scored.truncate(k);
        scored
    }

    /// Template-backed pairs owned by `source`.
    pub fn template_pairs_for(&self, source: &str) -> Vec<CandidatePair> {
        let Some(entry) = self.db.entry(source) else {
            return Vec::new();
        };
        extract_templates(entry, self.db)
            .into_iter()
            .map(|tpl| {
                let (score, _) = self.sim_api(source, &tpl.invoked);
                CandidatePair {
                    source: source.to_string(),
                    target: tpl.invoked.clone(),
                    score,
                    channel: Channel::Template,
                    template: Some(tpl),
                }
            })
            .collect()
    }

    /// Candidates for the given sources, in source-name order.
    pub fn candidates_for<'s, I>(&self, sources: I, k: usize) -> Vec<CandidatePair>
    where
        I: IntoIterator<Item = &'s str>,
    {
        let sources: Vec<&str> = sources.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        sources
            .par_iter()
            .map(|s| {
                let mut out = self.ranked_for(s, k);
                out.extend(self.template_pairs_for(s));
                out
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Candidates for every API in the corpus.
pub fn top_k_pairs(db: &CorpusDb, k: usize, embedder: DocEmbedder) -> Vec<CandidatePair> {
    let k = k.max(1);
    let matcher = Matcher::new(db, embedder);
    matcher.candidates_for(db.names(), k)
}
