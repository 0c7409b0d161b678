//! End-to-end cascade: retrieve → verify → score → fuse → re-rank.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::agent::AgentBackend;
use crate::error::{Error, Result};
use crate::fusion::DEFAULT_LAMBDA;
use crate::fusion::{fuse_gated, rerank, semantic_score, FusedScore, QueryRanking, SemanticOutcome, TextEmbedder};
use crate::retriever::{retrieve_topk, CandidatePool, GalleryIndex, QueryRecord, DEFAULT_K};
use crate::squad::{run_squad, Outcome, SquadConfig, VerificationTranscript};

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeParams {
    pub k: usize,
    pub lambda: f64,
    pub squad: SquadConfig,
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            lambda: DEFAULT_LAMBDA,
            squad: SquadConfig::default(),
        }
    }
}

impl CascadeParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        self.squad.validate()
    }
}

/// Verification result for one candidate, ready for fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub item_id: String,
    pub gate_open: bool,
    pub outcome: Outcome,
    pub semantic: SemanticOutcome,
}

/// Turns transcripts into semantic outcomes. A verified caption that cannot
/// be embedded degrades the candidate to structural scoring.
pub fn score_transcripts(
    query: &QueryRecord,
    transcripts: &[VerificationTranscript],
    embedder: &dyn TextEmbedder,
) -> Vec<ScoredCandidate> {
    transcripts
        .par_iter()
        .map(|t| {
            let (outcome, semantic) = match (t.outcome, t.final_caption.as_deref()) {
                (Outcome::Verified, Some(caption)) => match semantic_score(embedder, &query.text, caption) {
                    Ok(s) => (Outcome::Verified, SemanticOutcome::Score(s)),
                    Err(e) => {
                        tracing::warn!(query = %query.query_id, item = %t.item_id, error = %e, "semantic scoring failed");
                        (Outcome::Degraded, SemanticOutcome::Degraded)
                    }
                },
                (Outcome::Verified, None) | (Outcome::Degraded, _) => (Outcome::Degraded, SemanticOutcome::Degraded),
                (Outcome::Rejected, _) => (Outcome::Rejected, SemanticOutcome::Rejected),
                (Outcome::Skipped, _) => (Outcome::Skipped, SemanticOutcome::Skipped),
            };
            ScoredCandidate {
                item_id: t.item_id.clone(),
                gate_open: t.gate_activated,
                outcome,
                semantic,
            }
        })
        .collect()
}

/// Fuses one pool with its scored candidates and re-ranks it.
pub fn fuse_pool(pool: &CandidatePool, scored: &[ScoredCandidate], lambda: f64) -> Result<QueryRanking> {
    let by_id: HashMap<&str, &ScoredCandidate> = scored.iter().map(|s| (s.item_id.as_str(), s)).collect();
    if by_id.len() != scored.len() {
        return Err(Error::CoverageMismatch(format!(
            "query {:?}: duplicate transcripts",
            pool.query_id
        )));
    }
    let fused = pool
        .entries
        .iter()
        .map(|entry| {
            let s = by_id.get(entry.item_id.as_str()).ok_or_else(|| {
                Error::CoverageMismatch(format!(
                    "query {:?}: no transcript for {:?}",
                    pool.query_id, entry.item_id
                ))
            })?;
            let fusion = fuse_gated(s.gate_open, entry.s_str_norm, s.semantic, lambda);
            Ok(FusedScore::new(entry, fusion, s.outcome))
        })
        .collect::<Result<Vec<_>>>()?;
    rerank(pool, fused)
}

/// Everything one cascade run produced, in query order.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeRun {
    pub pools: Vec<CandidatePool>,
    pub transcripts: Vec<Vec<VerificationTranscript>>,
    pub rankings: Vec<QueryRanking>,
}

/// Borrowed inputs shared by every stage.
#[derive(Clone, Copy)]
pub struct Cascade<'a> {
    pub index: &'a GalleryIndex,
    pub queries: &'a [QueryRecord],
    pub backend: &'a dyn AgentBackend,
    pub embedder: &'a dyn TextEmbedder,
}

impl<'a> Cascade<'a> {
    pub fn retrieve(&self, k: usize) -> Result<Vec<CandidatePool>> {
        retrieve_all(self.index, self.queries, k)
    }

    pub fn verify(&self, pools: &[CandidatePool], squad: &SquadConfig) -> Vec<Vec<VerificationTranscript>> {
        self.queries
            .par_iter()
            .zip(pools.par_iter())
            .map(|(q, pool)| run_squad(q, pool, self.index, squad, self.backend))
            .collect()
    }

    pub fn score(&self, transcripts: &[Vec<VerificationTranscript>]) -> Vec<Vec<ScoredCandidate>> {
        self.queries
            .par_iter()
            .zip(transcripts.par_iter())
            .map(|(q, ts)| score_transcripts(q, ts, self.embedder))
            .collect()
    }

    pub fn fuse(
        &self,
        pools: &[CandidatePool],
        scored: &[Vec<ScoredCandidate>],
        lambda: f64,
    ) -> Result<Vec<QueryRanking>> {
        pools
            .par_iter()
            .zip(scored.par_iter())
            .map(|(pool, s)| fuse_pool(pool, s, lambda))
            .collect()
    }

    pub fn run(&self, params: &CascadeParams) -> Result<CascadeRun> {
        params.validate()?;
        let pools = self.retrieve(params.k)?;
        let transcripts = self.verify(&pools, &params.squad);
        let scored = self.score(&transcripts);
        let rankings = self.fuse(&pools, &scored, params.lambda)?;
        Ok(CascadeRun {
            pools,
            transcripts,
            rankings,
        })
    }
}

pub fn retrieve_all(index: &GalleryIndex, queries: &[QueryRecord], k: usize) -> Result<Vec<CandidatePool>> {
    queries.par_iter().map(|q| retrieve_topk(index, q, k)).collect()
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `workers` is `None`.
pub fn with_workers<T, F>(workers: Option<usize>, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidConfig("workers must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
