//! Structure-first retrieval cascade with gated multi-agent verification.
//!
//! A cheap structural retriever recalls a top-K candidate pool per query.
//! Candidates whose normalized structural score clears a threshold are
//! handed to three agents (Detective, Analyst, Writer); the Writer's caption
//! is compared with the query text and the resulting semantic score is
//! blended with the structural one to produce the final ranking.

pub mod agent;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod manifest;
pub mod miner;
pub mod pipeline;
pub mod retriever;
pub mod squad;
pub mod tensor;

pub use agent::{
    parse_checklist, parse_verdict, render_prompt, AgentBackend, AgentBackendConfig, AgentRole, Checklist,
    ChecklistAnswers, InvocationContext, PromptInputs, ScriptedBackend, ScriptedResponse, Verdict, VerdictKind,
};
pub use error::{Error, Result};
pub use eval::{average_precision, evaluate, evaluate_grouped, recall_at_k, sweep, EvalMetrics, SweepGrid};
pub use fusion::{
    fuse, rerank, semantic_score, Branch, EmbedderConfig, FusedScore, HashedEmbedder, QueryRanking, SemanticOutcome,
    TextEmbedder,
};
pub use manifest::{load_gallery, load_qrels, load_queries, Qrels, Tags};
pub use miner::{emit_sft_dataset, mine_hard_negatives, MiningConfig, SftRecord};
pub use pipeline::{Cascade, CascadeParams, CascadeRun};
pub use retriever::{retrieve_topk, CandidatePool, GalleryIndex, GalleryItem, PoolEntry, QueryRecord};
pub use squad::{gate, run_squad, verify_candidate, Outcome, SquadConfig, VerificationTranscript};
pub use tensor::{
    cosine_similarity, min_max_normalize, pose_cross_attention, softmax_rows, AttentionWeights, EmbeddingVector,
    FeatureMatrix,
};
