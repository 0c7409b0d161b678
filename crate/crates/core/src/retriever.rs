//! Exact top-K structural retrieval over an in-memory gallery.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::Tags;
use crate::tensor::{cosine_with_norms, min_max_normalize, EmbeddingVector};

/// Pool depth used when none is configured.
pub const DEFAULT_K: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryItem {
    pub item_id: String,
    pub embedding: EmbeddingVector,
    pub image_ref: String,
    #[serde(default)]
    pub tags: Tags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    pub embedding: EmbeddingVector,
    #[serde(default)]
    pub tags: Tags,
}

/// Immutable gallery with precomputed norms.
#[derive(Debug, Clone, Default)]
pub struct GalleryIndex {
    items: Vec<GalleryItem>,
    norms: Vec<f64>,
    by_id: HashMap<String, usize>,
    dim: Option<usize>,
}

impl GalleryIndex {
    pub fn build(items: Vec<GalleryItem>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(items.len());
        let dim = items.first().map(|i| i.embedding.dim());
        for (pos, item) in items.iter().enumerate() {
            if let Some(expected) = dim {
                if item.embedding.dim() != expected {
                    return Err(Error::DimensionMismatch {
                        expected,
                        found: item.embedding.dim(),
                    });
                }
            }
            if by_id.insert(item.item_id.clone(), pos).is_some() {
                return Err(Error::DuplicateId(item.item_id.clone()));
            }
        }
        let norms = items.iter().map(|i| i.embedding.norm()).collect();
        Ok(Self {
            items,
            norms,
            by_id,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Embedding dimension, or `None` for an empty gallery.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn items(&self) -> &[GalleryItem] {
        &self.items
    }

    pub fn get(&self, item_id: &str) -> Option<&GalleryItem> {
        self.by_id.get(item_id).map(|&i| &self.items[i])
    }
}

/// One retrieved candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub item_id: String,
    /// Raw cosine score; `-inf` (written as `null`) for zero-norm items.
    #[serde(with = "score_or_null")]
    pub s_str_raw: f64,
    pub s_str_norm: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub query_id: String,
    pub entries: Vec<PoolEntry>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn item_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.item_id.as_str()).collect()
    }
}

/// Score descending, then item id ascending.
pub(crate) fn ranking_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    score_desc(a_score, b_score).then_with(|| a_id.cmp(b_id))
}

/// Descending score order in which -0.0 and +0.0 tie.
pub(crate) fn score_desc(a: f64, b: f64) -> Ordering {
    (b + 0.0).total_cmp(&(a + 0.0))
}

/// Returns the `k` gallery items most similar to `query`, best first.
///
/// Normalized scores are min-max scaled over the returned pool only. Items
/// with a zero-norm embedding score `-inf`, rank last and normalize to 0.
pub fn retrieve_topk(index: &GalleryIndex, query: &QueryRecord, k: usize) -> Result<CandidatePool> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut pool = CandidatePool {
        query_id: query.query_id.clone(),
        entries: Vec::new(),
    };
    let Some(dim) = index.dim else {
        return Ok(pool);
    };
    if query.embedding.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: query.embedding.dim(),
        });
    }
    let query_norm = query.embedding.norm();
    if query_norm == 0.0 {
        return Err(Error::ZeroNormVector);
    }

    let mut scored: Vec<(f64, usize)> = index
        .items
        .par_iter()
        .zip(index.norms.par_iter())
        .enumerate()
        .map(|(pos, (item, &norm))| {
            let s = match cosine_with_norms(&query.embedding, &item.embedding, query_norm, norm) {
                Ok(s) => s,
                Err(Error::ZeroNormVector) => f64::NEG_INFINITY,
                Err(e) => unreachable!("dimensions validated at build: {e}"),
            };
            (s, pos)
        })
        .collect();

    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        ranking_order(a.0, &index.items[a.1].item_id, b.0, &index.items[b.1].item_id)
    };
    let keep = k.min(scored.len());
    if keep < scored.len() {
        scored.select_nth_unstable_by(keep - 1, cmp);
        scored.truncate(keep);
    }
    scored.sort_unstable_by(cmp);

    let finite: Vec<f64> = scored.iter().map(|s| s.0).filter(|s| s.is_finite()).collect();
    let mut norms = if finite.is_empty() {
        Vec::new()
    } else {
        min_max_normalize(&finite)?
    };
    norms.resize(scored.len(), 0.0);

    pool.entries = scored
        .into_iter()
        .zip(norms)
        .enumerate()
        .map(|(i, ((raw, pos), norm))| PoolEntry {
            item_id: index.items[pos].item_id.clone(),
            s_str_raw: raw,
            s_str_norm: norm,
            rank: i + 1,
        })
        .collect();
    Ok(pool)
}

mod score_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}
