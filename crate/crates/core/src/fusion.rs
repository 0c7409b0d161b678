//! Semantic scoring of synthesized captions, threshold-gated score fusion and
//! final re-ranking.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::read_jsonl;
use crate::retriever::{ranking_order, score_desc, CandidatePool, PoolEntry};
use crate::squad::Outcome;
use crate::tensor::{cosine_similarity, EmbeddingVector};

pub const DEFAULT_LAMBDA: f64 = 0.4;

/// Text encoder used to compare the query with a synthesized caption.
pub trait TextEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Bag-of-tokens embedder: lowercase, split on whitespace, hash every token
/// into one of `dim` buckets, count, L2-normalize.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
    seed: u64,
}

impl HashedEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "hashed embedder dimension must be at least 1".into(),
            ));
        }
        Ok(Self { dim, seed })
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(head) % self.dim as u64) as usize
    }
}

impl TextEmbedder for HashedEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut counts = vec![0.0; self.dim];
        for token in text.to_lowercase().split_whitespace() {
            counts[self.bucket(token)] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormVector);
        }
        EmbeddingVector::new(counts.into_iter().map(|c| c / norm).collect())
    }
}

#[derive(Deserialize)]
struct LookupLine {
    text: String,
    embedding: EmbeddingVector,
}

/// Precomputed embeddings keyed by exact text.
#[derive(Debug, Clone, Default)]
pub struct LookupEmbedder {
    table: HashMap<String, EmbeddingVector>,
}

impl LookupEmbedder {
    pub fn new(entries: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Self {
        Self {
            table: entries.into_iter().collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rows = read_jsonl::<LookupLine>(path)?;
        Ok(Self::new(rows.into_iter().map(|(_, l)| (l.text, l.embedding))))
    }
}

impl TextEmbedder for LookupEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::EmbedderFailure(format!("no embedding for {text:?}")))
    }
}

/// OpenAI-compatible `/embeddings` client.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    token: Option<String>,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, timeout: Duration, auth_env: &str) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("http client: {e}")))?;
        Ok(Self {
            client,
            url: format!("{}/embeddings", endpoint.trim_end_matches('/')),
            model: model.to_string(),
            token: std::env::var(auth_env).ok().filter(|t| !t.is_empty()),
        })
    }
}

impl TextEmbedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let fail = |m: String| Error::EmbedderFailure(m);
        let mut req = self
            .client
            .post(&self.url)
            .json(&json!({"model": self.model, "input": [text]}));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("HTTP {}", resp.status())));
        }
        let v: serde_json::Value = resp.json().map_err(|e| fail(e.to_string()))?;
        let values: Vec<f64> = serde_json::from_value(v["data"][0]["embedding"].clone())
            .map_err(|_| fail("response has no data[0].embedding".into()))?;
        EmbeddingVector::new(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Lookup,
    Hashed,
    Http,
}

fn default_dimension() -> usize {
    256
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_auth_env() -> String {
    "SQUADRANK_API_KEY".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fixture_path: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_auth_env")]
    pub auth_env: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hashed,
            dimension: default_dimension(),
            seed: 0,
            fixture_path: None,
            endpoint: None,
            model_name: None,
            timeout_ms: default_timeout_ms(),
            auth_env: default_auth_env(),
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EmbedderKind::Lookup if self.fixture_path.is_none() => {
                Err(Error::InvalidConfig("lookup embedder requires fixture_path".into()))
            }
            EmbedderKind::Http if self.endpoint.is_none() || self.model_name.is_none() => Err(Error::InvalidConfig(
                "http embedder requires endpoint and model_name".into(),
            )),
            EmbedderKind::Hashed if self.dimension == 0 => Err(Error::InvalidConfig(
                "hashed embedder dimension must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn TextEmbedder>> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::Hashed => Box::new(HashedEmbedder::new(self.dimension, self.seed)?),
            EmbedderKind::Lookup => Box::new(LookupEmbedder::load(self.fixture_path.as_deref().expect("validated"))?),
            EmbedderKind::Http => Box::new(HttpEmbedder::new(
                self.endpoint.as_deref().expect("validated"),
                self.model_name.as_deref().expect("validated"),
                Duration::from_millis(self.timeout_ms),
                &self.auth_env,
            )?),
        })
    }
}

/// Cosine similarity between the embeddings of the query and a new caption.
pub fn semantic_score(embedder: &dyn TextEmbedder, query_text: &str, new_caption: &str) -> Result<f64> {
    if query_text.trim().is_empty() || new_caption.trim().is_empty() {
        return Err(Error::EmptyInput("semantic score text"));
    }
    let a = embedder.embed(query_text)?;
    let b = embedder.embed(new_caption)?;
    cosine_similarity(&a, &b)
}

/// What verification produced for one candidate, as fusion sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SemanticOutcome {
    Score(f64),
    Rejected,
    Skipped,
    Degraded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Fused,
    StructuralOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fusion {
    pub s_sem: Option<f64>,
    pub s_final: f64,
    pub branch: Branch,
}

/// Fuses with the gate evaluated on the normalized structural score.
pub fn fuse(s_str_norm: f64, outcome: SemanticOutcome, lambda: f64, xi: f64) -> Fusion {
    fuse_gated(s_str_norm > xi, s_str_norm, outcome, lambda)
}

/// `λ·s̃ + (1 − λ)·s_sem` when the gate is open and verification produced a
/// score, `λ·s̃` for rejected candidates, and `s̃` unchanged otherwise.
pub fn fuse_gated(gate_open: bool, s_str_norm: f64, outcome: SemanticOutcome, lambda: f64) -> Fusion {
    let s_sem = match (gate_open, outcome) {
        (true, SemanticOutcome::Score(s)) => s,
        (true, SemanticOutcome::Rejected) => 0.0,
        _ => {
            return Fusion {
                s_sem: None,
                s_final: s_str_norm,
                branch: Branch::StructuralOnly,
            }
        }
    };
    Fusion {
        s_sem: Some(s_sem),
        s_final: lambda * s_str_norm + (1.0 - lambda) * s_sem,
        branch: Branch::Fused,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    pub item_id: String,
    #[serde(skip)]
    pub s_str_raw: f64,
    pub s_str_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_sem: Option<f64>,
    pub s_final: f64,
    pub branch: Branch,
    pub outcome: Outcome,
}

impl FusedScore {
    pub fn new(entry: &PoolEntry, fusion: Fusion, outcome: Outcome) -> Self {
        Self {
            item_id: entry.item_id.clone(),
            s_str_raw: entry.s_str_raw,
            s_str_norm: entry.s_str_norm,
            s_sem: fusion.s_sem,
            s_final: fusion.s_final,
            branch: fusion.branch,
            outcome,
        }
    }
}

/// Final ordering for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query_id: String,
    pub ranking: Vec<FusedScore>,
}

impl QueryRanking {
    pub fn item_ids(&self) -> Vec<&str> {
        self.ranking.iter().map(|e| e.item_id.as_str()).collect()
    }
}

/// Sorts by `s_final` descending. Ties fall back to the coarse order: raw
/// structural score descending, then item id.
pub fn rerank(pool: &CandidatePool, mut fused: Vec<FusedScore>) -> Result<QueryRanking> {
    let pool_ids: BTreeSet<&str> = pool.entries.iter().map(|e| e.item_id.as_str()).collect();
    let fused_ids: BTreeSet<&str> = fused.iter().map(|f| f.item_id.as_str()).collect();
    if fused.len() != pool.len() || pool_ids != fused_ids {
        return Err(Error::CoverageMismatch(format!(
            "query {:?}: pool has {} items, {} fused scores cover {} distinct ids",
            pool.query_id,
            pool.len(),
            fused.len(),
            fused_ids.len()
        )));
    }
    fused.sort_by(|a, b| {
        score_desc(a.s_final, b.s_final).then_with(|| ranking_order(a.s_str_raw, &a.item_id, b.s_str_raw, &b.item_id))
    });
    Ok(QueryRanking {
        query_id: pool.query_id.clone(),
        ranking: fused,
    })
}
