//! Caption and retrieval metrics.
//!
//! CIDEr here is the plain variant: TF-IDF vectors over n-grams for
//! n = 1..4, cosine similarity averaged over references and over n, scaled
//! by 10. There is no length penalty and no count clipping.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::tensor::Tensor;

pub const CIDER_MAX_N: usize = 4;

type Gram = Vec<String>;

/// Lowercased whitespace tokens.
pub fn cider_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Gram, f64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// Document frequencies over the reference sets of a test corpus.
#[derive(Clone, Debug)]
pub struct CiderCorpus {
    df: HashMap<Gram, f64>,
    n_images: usize,
}

impl CiderCorpus {
    /// `refs[i]` holds the tokenized references of image `i`.
    pub fn new(refs: &[Vec<Vec<String>>]) -> Self {
        let mut df = HashMap::new();
        for image in refs {
            let mut seen: HashSet<Gram> = HashSet::new();
            for r in image {
                for n in 1..=CIDER_MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Self { df, n_images: refs.len() }
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn df(&self, gram: &[String]) -> f64 {
        self.df.get(gram).copied().unwrap_or(0.0)
    }

    /// `ln(N / max(1, df))`.
    pub fn idf(&self, gram: &[String]) -> f64 {
        (self.n_images.max(1) as f64 / self.df(gram).max(1.0)).ln()
    }

    fn vector(&self, tokens: &[String], n: usize) -> HashMap<Gram, f64> {
        let counts = ngram_counts(tokens, n);
        let total: f64 = counts.values().sum();
        counts.into_iter().map(|(g, c)| {
            let w = c / total * self.idf(&g);
            (g, w)
        }).collect()
    }

    /// CIDEr of `candidate` against `references`, in `[0, 10]`.
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> f64 {
        if candidate.is_empty() || references.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for n in 1..=CIDER_MAX_N {
            let c = self.vector(candidate, n);
            let per_ref: f64 = references.iter().map(|r| cosine(&c, &self.vector(r, n))).sum();
            sum += per_ref / references.len() as f64;
        }
        10.0 * sum / CIDER_MAX_N as f64
    }
}

fn cosine(a: &HashMap<Gram, f64>, b: &HashMap<Gram, f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Mean CIDEr over a test set; `candidates[i]` is scored against `refs[i]`
/// with document frequencies from all of `refs`.
pub fn corpus_cider(candidates: &[String], refs: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != refs.len() {
        return Err(Error::Shape(format!("{} candidates for {} reference sets", candidates.len(), refs.len())));
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let tok_refs: Vec<Vec<Vec<String>>> = refs.iter().map(|rs| rs.iter().map(|r| cider_tokens(r)).collect()).collect();
    let corpus = CiderCorpus::new(&tok_refs);
    let total: f64 = candidates.iter().zip(&tok_refs).map(|(c, r)| corpus.score(&cider_tokens(c), r)).sum();
    Ok(total / candidates.len() as f64)
}

/// Fraction of rows whose diagonal entry is among the `k` largest; ties
/// count in the item's favour.
pub fn recall_from_similarity(sim: &[Vec<f64>], k: usize) -> f64 {
    let n = sim.len();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n).filter(|&i| sim[i].iter().filter(|&&s| s > sim[i][i]).count() < k).count();
    hits as f64 / n as f64
}

/// Recall@k with ITC similarity: max over queries of the cosine between
/// query `[nq, d]` and text `[d]` features.
pub fn retrieval_recall(query_feats: &[Tensor], text_feats: &[Tensor], k: usize) -> Result<f64> {
    if query_feats.len() != text_feats.len() {
        return Err(Error::Shape(format!("{} query sets for {} texts", query_feats.len(), text_feats.len())));
    }
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let texts: Vec<Vec<f64>> = text_feats.iter().map(|t| unit(t.data())).collect();
    let mut sim = Vec::with_capacity(query_feats.len());
    for q in query_feats {
        let d = *q.shape().last().unwrap_or(&0);
        let rows: Vec<Vec<f64>> = q.data().chunks(d).map(unit).collect();
        sim.push(
            texts
                .iter()
                .map(|t| rows.iter().map(|r| r.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max))
                .collect(),
        );
    }
    Ok(recall_from_similarity(&sim, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modality: ModalityId,
    pub split: String,
    pub cider: f64,
    pub recall_at_1: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Mean absolute box error (region modalities).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_l1: Option<f64>,
    /// Fraction of region captions naming the boxed object.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_accuracy: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        cider_tokens(s)
    }

    #[test]
    fn proportional_and_disjoint_cases() {
        let refs = vec![vec![toks("a red circle above a blue square")], vec![toks("one green cube two yellow cones")]];
        let corpus = CiderCorpus::new(&refs);
        let s = corpus.score(&toks("a red circle above a blue square"), &refs[0]);
        assert!((s - 10.0).abs() < 1e-9);
        assert_eq!(corpus.score(&toks("torus sphere"), &refs[0]), 0.0);
        assert_eq!(corpus.score(&[], &refs[0]), 0.0);
    }

    #[test]
    fn recall_extremes() {
        let id = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(recall_from_similarity(&id, 1), 1.0);
        let anti = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(recall_from_similarity(&anti, 1), 0.0);
        assert_eq!(recall_from_similarity(&anti, 2), 1.0);
    }
}
