//! Threshold-gated, multi-round verification of a candidate pool.
//!
//! Each gated candidate goes through up to `rounds` cycles of
//! Detective → Analyst → Writer. A Discard verdict ends verification for
//! that candidate at once, so the Analyst and Writer only ever run on
//! candidates the Detective accepted. Round `r > 1` hands round `r − 1`'s
//! caption to the Analyst as prior context.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{
    parse_checklist, parse_verdict, render_prompt, AgentBackend, AgentRole, Checklist, ChecklistAnswers,
    InvocationContext, PromptInputs, Verdict, VerdictKind,
};
use crate::error::{Error, Result};
use crate::retriever::{CandidatePool, GalleryIndex, PoolEntry, QueryRecord};

pub const DEFAULT_XI: f64 = 0.95;
pub const DEFAULT_ROUNDS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadConfig {
    /// Gate threshold; a candidate is verified only if its score is strictly greater.
    pub xi: f64,
    pub rounds: u32,
    pub checklist: Checklist,
    pub include_query_in_writer: bool,
    /// Gate on the raw structural score instead of the pool-normalized one.
    pub gate_on_raw: bool,
}

impl Default for SquadConfig {
    fn default() -> Self {
        Self {
            xi: DEFAULT_XI,
            rounds: DEFAULT_ROUNDS,
            checklist: Checklist::default(),
            include_query_in_writer: false,
            gate_on_raw: false,
        }
    }
}

impl SquadConfig {
    /// ξ may go below zero, which opens the gate for every candidate.
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.xi) {
            return Err(Error::InvalidConfig(format!("xi must lie in [-1, 1], got {}", self.xi)));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be at least 1".into()));
        }
        Ok(())
    }

    /// The score compared against ξ for a pool entry.
    pub fn gate_score(&self, entry: &PoolEntry) -> f64 {
        if self.gate_on_raw {
            entry.s_str_raw
        } else {
            entry.s_str_norm
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Below the gate; never shown to an agent.
    Skipped,
    /// The Detective said no.
    Rejected,
    /// Every round completed and produced a caption.
    Verified,
    /// A backend or parse failure cut verification short.
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<ChecklistAnswers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationTranscript {
    pub query_id: String,
    pub item_id: String,
    pub gate_activated: bool,
    pub rounds: Vec<RoundRecord>,
    pub final_caption: Option<String>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_cause: Option<String>,
}

pub fn gate(score: f64, xi: f64) -> bool {
    score > xi
}

pub fn verify_candidate(
    query: &QueryRecord,
    item_id: &str,
    image_ref: &str,
    gate_score: f64,
    cfg: &SquadConfig,
    backend: &dyn AgentBackend,
) -> VerificationTranscript {
    let mut t = VerificationTranscript {
        query_id: query.query_id.clone(),
        item_id: item_id.to_string(),
        gate_activated: gate(gate_score, cfg.xi),
        rounds: Vec::new(),
        final_caption: None,
        outcome: Outcome::Skipped,
        degraded_cause: None,
    };
    if !t.gate_activated {
        return t;
    }
    match run_rounds(query, item_id, image_ref, cfg, backend, &mut t.rounds) {
        Ok(RoundsEnd::Rejected) => t.outcome = Outcome::Rejected,
        Ok(RoundsEnd::Verified(caption)) => {
            t.final_caption = Some(caption);
            t.outcome = Outcome::Verified;
        }
        Err(e) => {
            tracing::warn!(query = %query.query_id, item = item_id, error = %e, "verification degraded to structural score");
            t.outcome = Outcome::Degraded;
            t.degraded_cause = Some(e.to_string());
        }
    }
    t
}

enum RoundsEnd {
    Rejected,
    Verified(String),
}

fn run_rounds(
    query: &QueryRecord,
    item_id: &str,
    image_ref: &str,
    cfg: &SquadConfig,
    backend: &dyn AgentBackend,
    records: &mut Vec<RoundRecord>,
) -> Result<RoundsEnd> {
    let mut prior: Option<String> = None;
    for round in 1..=cfg.rounds {
        let ctx = InvocationContext {
            query_id: &query.query_id,
            item_id,
            round,
        };
        let call = |role, inputs: &PromptInputs<'_>| -> Result<String> {
            let prompt = render_prompt(role, inputs)?;
            backend.invoke(&ctx, role, image_ref, &prompt)
        };
        let base = PromptInputs {
            query_text: &query.text,
            checklist: Some(&cfg.checklist),
            ..Default::default()
        };

        let verdict = parse_verdict(&call(AgentRole::Detective, &base)?)?;
        let discard = verdict.kind == VerdictKind::Discard;
        records.push(RoundRecord {
            round_index: round,
            verdict: Some(verdict),
            answers: None,
            caption: None,
        });
        if discard {
            return Ok(RoundsEnd::Rejected);
        }

        let raw = call(
            AgentRole::Analyst,
            &PromptInputs {
                prior_caption: prior.as_deref(),
                ..base
            },
        )?;
        let answers = parse_checklist(&raw, &cfg.checklist);
        let record = records.last_mut().expect("pushed above");
        record.answers = Some(answers);

        let caption = call(
            AgentRole::Writer,
            &PromptInputs {
                evidence: record.answers.as_ref(),
                include_query: cfg.include_query_in_writer,
                ..base
            },
        )?;
        let caption = caption.trim();
        if caption.is_empty() {
            return Err(Error::EmptyResponse(AgentRole::Writer));
        }
        record.caption = Some(caption.to_string());
        prior = Some(caption.to_string());
    }
    Ok(RoundsEnd::Verified(prior.expect("rounds >= 1")))
}

/// Verifies every pool entry; transcripts come back in pool rank order.
pub fn run_squad(
    query: &QueryRecord,
    pool: &CandidatePool,
    index: &GalleryIndex,
    cfg: &SquadConfig,
    backend: &dyn AgentBackend,
) -> Vec<VerificationTranscript> {
    pool.entries
        .par_iter()
        .map(|entry| {
            let score = cfg.gate_score(entry);
            match index.get(&entry.item_id) {
                Some(item) => verify_candidate(query, &entry.item_id, &item.image_ref, score, cfg, backend),
                None => {
                    let gated = gate(score, cfg.xi);
                    VerificationTranscript {
                        query_id: query.query_id.clone(),
                        item_id: entry.item_id.clone(),
                        gate_activated: gated,
                        rounds: Vec::new(),
                        final_caption: None,
                        outcome: if gated { Outcome::Degraded } else { Outcome::Skipped },
                        degraded_cause: gated.then(|| format!("item {:?} is not in the gallery", entry.item_id)),
                    }
                }
            }
        })
        .collect()
}
