//! Structural hard-negative mining and emission of the role-specific
//! instruction-tuning dataset.
//!
//! Hard negatives are items the structural retriever ranks in the top
//! `k_mine` for a query although they are not relevant to it. Detective
//! examples pair queries with both relevant items ("Yes") and hard negatives
//! ("No"), balanced. Analyst and Writer examples are built from relevant
//! pairs only, since there is no trustworthy evidence target for a negative.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{render_prompt, AgentRole, Checklist, ChecklistAnswers, PromptInputs};
use crate::error::{Error, Result};
use crate::manifest::Qrels;
use crate::retriever::{retrieve_topk, GalleryIndex, QueryRecord};

pub const DEFAULT_TOTAL_TARGET: usize = 9000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HardNegative {
    pub query_id: String,
    pub item_id: String,
    /// 1-based structural rank.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PositivePair {
    pub query_id: String,
    pub item_id: String,
}

/// Top-`k_mine` retrieved items minus each query's relevant set, in rank order.
pub fn mine_hard_negatives(
    queries: &[QueryRecord],
    index: &GalleryIndex,
    qrels: &Qrels,
    k_mine: usize,
) -> Result<Vec<HardNegative>> {
    if let Some(q) = queries.iter().find(|q| !qrels.contains_key(&q.query_id)) {
        return Err(Error::MissingQrels(q.query_id.clone()));
    }
    let per_query: Vec<Vec<HardNegative>> = queries
        .par_iter()
        .map(|q| {
            let relevant = &qrels[&q.query_id];
            let pool = retrieve_topk(index, q, k_mine)?;
            Ok(pool
                .entries
                .into_iter()
                .filter(|e| !relevant.contains(&e.item_id))
                .map(|e| HardNegative {
                    query_id: q.query_id.clone(),
                    item_id: e.item_id,
                    rank: e.rank,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

/// Relevant (query, item) pairs whose item exists in the gallery.
pub fn positive_pairs(queries: &[QueryRecord], index: &GalleryIndex, qrels: &Qrels) -> Result<Vec<PositivePair>> {
    let mut out = Vec::new();
    for q in queries {
        let relevant = qrels
            .get(&q.query_id)
            .ok_or_else(|| Error::MissingQrels(q.query_id.clone()))?;
        out.extend(
            relevant
                .iter()
                .filter(|id| index.get(id).is_some())
                .map(|id| PositivePair {
                    query_id: q.query_id.clone(),
                    item_id: id.clone(),
                }),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    HardNegative,
}

impl Label {
    fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::HardNegative => "hard_negative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub role: AgentRole,
    pub query_id: String,
    pub item_id: String,
    pub image_ref: String,
    pub instruction: String,
    pub expected_response: String,
    pub label: Label,
    /// The expected response could not be derived and must be annotated.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub needs_annotation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub k_mine: usize,
    /// Explicit per-role counts. When absent, `total_target` is split into
    /// thirds, remainder going to the earlier roles.
    pub per_role_quota: Option<BTreeMap<AgentRole, usize>>,
    pub total_target: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            k_mine: 10,
            per_role_quota: None,
            total_target: DEFAULT_TOTAL_TARGET,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn quotas(&self) -> BTreeMap<AgentRole, usize> {
        match &self.per_role_quota {
            Some(q) => AgentRole::ALL
                .iter()
                .map(|r| (*r, q.get(r).copied().unwrap_or(0)))
                .collect(),
            None => {
                let base = self.total_target / 3;
                let extra = self.total_target % 3;
                AgentRole::ALL
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (*r, base + usize::from(i < extra)))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSummary {
    pub per_role_counts: BTreeMap<AgentRole, usize>,
    pub per_label_counts: BTreeMap<String, usize>,
    pub needs_annotation: usize,
    pub seed: u64,
    pub k_mine: usize,
}

/// Everything the emitter draws from.
pub struct SftSource<'a> {
    pub queries: &'a [QueryRecord],
    pub index: &'a GalleryIndex,
    pub negatives: &'a [HardNegative],
    pub positives: &'a [PositivePair],
    /// Reference caption per gallery item.
    pub captions: &'a HashMap<String, String>,
}

struct Candidate<'a> {
    query: &'a QueryRecord,
    item_id: &'a str,
    rank: usize,
    label: Label,
}

fn sample<'a>(mut supply: Vec<Candidate<'a>>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Candidate<'a>> {
    supply.shuffle(rng);
    supply.truncate(n);
    supply.sort_by(|a, b| {
        (&a.query.query_id, a.label, a.rank, a.item_id).cmp(&(&b.query.query_id, b.label, b.rank, b.item_id))
    });
    supply
}

fn rng_for(seed: u64, role: AgentRole, label: Label) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role as u64 * 2 + label as u64);
    rng
}

/// Draws records for every role quota and returns them in emission order:
/// role, then query id, then rank.
pub fn emit_sft_dataset(
    source: &SftSource<'_>,
    cfg: &MiningConfig,
    checklist: &Checklist,
) -> Result<(Vec<SftRecord>, SftSummary)> {
    let queries: HashMap<&str, &QueryRecord> = source.queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let lookup_query = |id: &str| {
        queries
            .get(id)
            .copied()
            .ok_or_else(|| Error::MissingQrels(id.to_string()))
    };
    let positives = || -> Result<Vec<Candidate<'_>>> {
        source
            .positives
            .iter()
            .map(|p| {
                Ok(Candidate {
                    query: lookup_query(&p.query_id)?,
                    item_id: &p.item_id,
                    rank: 0,
                    label: Label::Positive,
                })
            })
            .collect()
    };
    let quotas = cfg.quotas();
    let mut records = Vec::new();

    let q = quotas[&AgentRole::Detective];
    if q > 0 {
        let pos = positives()?;
        let neg = source
            .negatives
            .iter()
            .map(|n| {
                Ok(Candidate {
                    query: lookup_query(&n.query_id)?,
                    item_id: &n.item_id,
                    rank: n.rank,
                    label: Label::HardNegative,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (want_yes, want_no) = (q - q / 2, q / 2);
        if pos.len() < want_yes || neg.len() < want_no {
            return Err(Error::InsufficientPairs {
                role: AgentRole::Detective,
                requested: q,
                available: (2 * pos.len()).min(2 * neg.len() + 1),
            });
        }
        let mut chosen = sample(
            pos,
            want_yes,
            &mut rng_for(cfg.seed, AgentRole::Detective, Label::Positive),
        );
        chosen.extend(sample(
            neg,
            want_no,
            &mut rng_for(cfg.seed, AgentRole::Detective, Label::HardNegative),
        ));
        chosen.sort_by(|a, b| {
            (&a.query.query_id, a.label, a.rank, a.item_id).cmp(&(&b.query.query_id, b.label, b.rank, b.item_id))
        });
        for c in chosen {
            let instruction = render_prompt(
                AgentRole::Detective,
                &PromptInputs {
                    query_text: &c.query.text,
                    ..Default::default()
                },
            )?;
            let expected = if c.label == Label::Positive { "Yes" } else { "No" };
            records.push(record(
                source,
                AgentRole::Detective,
                &c,
                instruction,
                expected.to_string(),
                false,
            ));
        }
    }

    let q = quotas[&AgentRole::Analyst];
    if q > 0 {
        let pos = positives()?;
        if pos.len() < q {
            return Err(Error::InsufficientPairs {
                role: AgentRole::Analyst,
                requested: q,
                available: pos.len(),
            });
        }
        for c in sample(pos, q, &mut rng_for(cfg.seed, AgentRole::Analyst, Label::Positive)) {
            let instruction = render_prompt(
                AgentRole::Analyst,
                &PromptInputs {
                    query_text: &c.query.text,
                    checklist: Some(checklist),
                    ..Default::default()
                },
            )?;
            let evidence = tag_evidence(source, c.item_id, checklist);
            let needs_annotation = evidence.is_empty();
            records.push(record(
                source,
                AgentRole::Analyst,
                &c,
                instruction,
                evidence.to_lines(checklist),
                needs_annotation,
            ));
        }
    }

    let q = quotas[&AgentRole::Writer];
    if q > 0 {
        let pos: Vec<_> = positives()?
            .into_iter()
            .filter(|c| source.captions.get(c.item_id).is_some_and(|t| !t.trim().is_empty()))
            .collect();
        if pos.len() < q {
            return Err(Error::InsufficientPairs {
                role: AgentRole::Writer,
                requested: q,
                available: pos.len(),
            });
        }
        for c in sample(pos, q, &mut rng_for(cfg.seed, AgentRole::Writer, Label::Positive)) {
            let evidence = tag_evidence(source, c.item_id, checklist);
            let instruction = render_prompt(
                AgentRole::Writer,
                &PromptInputs {
                    query_text: &c.query.text,
                    checklist: Some(checklist),
                    evidence: Some(&evidence),
                    ..Default::default()
                },
            )?;
            let caption = source.captions[c.item_id].trim().to_string();
            records.push(record(source, AgentRole::Writer, &c, instruction, caption, false));
        }
    }

    let mut per_role_counts: BTreeMap<AgentRole, usize> = AgentRole::ALL.iter().map(|r| (*r, 0)).collect();
    let mut per_label_counts: BTreeMap<String, usize> = [Label::Positive, Label::HardNegative]
        .iter()
        .map(|l| (l.as_str().to_string(), 0))
        .collect();
    for r in &records {
        *per_role_counts.get_mut(&r.role).expect("all roles present") += 1;
        *per_label_counts.get_mut(r.label.as_str()).expect("all labels present") += 1;
    }
    let summary = SftSummary {
        per_role_counts,
        per_label_counts,
        needs_annotation: records.iter().filter(|r| r.needs_annotation).count(),
        seed: cfg.seed,
        k_mine: cfg.k_mine,
    };
    Ok((records, summary))
}

/// Checklist answers slot-filled from the item's tags.
fn tag_evidence(source: &SftSource<'_>, item_id: &str, checklist: &Checklist) -> ChecklistAnswers {
    match source.index.get(item_id) {
        Some(item) => ChecklistAnswers::from_pairs(checklist, item.tags.iter().map(|(k, v)| (k.as_str(), v.as_str()))),
        None => ChecklistAnswers::default(),
    }
}

fn record(
    source: &SftSource<'_>,
    role: AgentRole,
    c: &Candidate<'_>,
    instruction: String,
    expected_response: String,
    needs_annotation: bool,
) -> SftRecord {
    SftRecord {
        role,
        query_id: c.query.query_id.clone(),
        item_id: c.item_id.to_string(),
        image_ref: source
            .index
            .get(c.item_id)
            .map(|i| i.image_ref.clone())
            .unwrap_or_default(),
        instruction,
        expected_response,
        label: c.label,
        needs_annotation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{parse_checklist, parse_verdict, VerdictKind};
    use crate::manifest::Tags;
    use crate::retriever::GalleryItem;
    use crate::tensor::EmbeddingVector;
    use std::collections::BTreeSet;

    fn item(id: &str, angle: f64, tags: &[(&str, &str)]) -> GalleryItem {
        GalleryItem {
            item_id: id.into(),
            embedding: EmbeddingVector::new(vec![angle.cos(), angle.sin()]).unwrap(),
            image_ref: format!("img/{id}.jpg"),
            tags: tags
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect::<Tags>(),
        }
    }

    fn query(id: &str, angle: f64) -> QueryRecord {
        QueryRecord {
            query_id: id.into(),
            text: format!("query {id}"),
            embedding: EmbeddingVector::new(vec![angle.cos(), angle.sin()]).unwrap(),
            tags: Tags::new(),
        }
    }

    fn qrels(pairs: &[(&str, &[&str])]) -> Qrels {
        pairs
            .iter()
            .map(|(q, r)| (q.to_string(), r.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>()))
            .collect()
    }

    fn gallery() -> GalleryIndex {
        GalleryIndex::build(vec![
            item("g0", 0.0, &[("gender", "male"), ("action", "falling")]),
            item("g1", 0.1, &[]),
            item("g2", 0.2, &[("mood", "calm")]),
            item("g3", 0.3, &[("action", "running")]),
            item("g4", 1.5, &[]),
        ])
        .unwrap()
    }

    #[test]
    fn mining_examples() {
        let idx = gallery();
        let qs = [query("q", 0.0)];
        let negs = mine_hard_negatives(&qs, &idx, &qrels(&[("q", &["g0"])]), 3).unwrap();
        assert_eq!(
            negs.iter().map(|n| (n.item_id.as_str(), n.rank)).collect::<Vec<_>>(),
            vec![("g1", 2), ("g2", 3)]
        );

        let negs = mine_hard_negatives(&qs, &idx, &qrels(&[("q", &["g4"])]), 3).unwrap();
        assert_eq!(negs.len(), 3);

        let lone = GalleryIndex::build(vec![item("g0", 0.0, &[])]).unwrap();
        assert!(mine_hard_negatives(&qs, &lone, &qrels(&[("q", &["g0"])]), 3)
            .unwrap()
            .is_empty());

        assert!(matches!(
            mine_hard_negatives(&qs, &idx, &qrels(&[]), 3),
            Err(Error::MissingQrels(_))
        ));
    }

    fn setup() -> (Vec<QueryRecord>, GalleryIndex, Qrels) {
        let qs = vec![query("qa", 0.0), query("qb", 0.3)];
        (qs, gallery(), qrels(&[("qa", &["g0"]), ("qb", &["g3"])]))
    }

    fn quota(pairs: &[(AgentRole, usize)]) -> MiningConfig {
        MiningConfig {
            k_mine: 3,
            per_role_quota: Some(pairs.iter().copied().collect()),
            total_target: 0,
            seed: 11,
        }
    }

    #[test]
    fn detective_set_is_balanced() {
        let (qs, idx, qr) = setup();
        let negs = mine_hard_negatives(&qs, &idx, &qr, 3).unwrap();
        let pos = positive_pairs(&qs, &idx, &qr).unwrap();
        let captions = HashMap::new();
        let src = SftSource {
            queries: &qs,
            index: &idx,
            negatives: &negs,
            positives: &pos,
            captions: &captions,
        };
        let (recs, summary) =
            emit_sft_dataset(&src, &quota(&[(AgentRole::Detective, 4)]), &Checklist::default()).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs.iter().filter(|r| r.expected_response == "Yes").count(), 2);
        assert_eq!(recs.iter().filter(|r| r.expected_response == "No").count(), 2);
        assert_eq!(summary.per_label_counts["positive"], 2);
        assert_eq!(summary.per_label_counts["hard_negative"], 2);
        for r in &recs {
            let v = parse_verdict(&r.expected_response).unwrap();
            assert_eq!(v.kind == VerdictKind::Match, r.label == Label::Positive);
            assert!(r.instruction.contains("Is it a match? Yes or No!"));
            if r.label == Label::HardNegative {
                assert!(!qr[&r.query_id].contains(&r.item_id));
            } else {
                assert!(qr[&r.query_id].contains(&r.item_id));
            }
        }

        let err = emit_sft_dataset(&src, &quota(&[(AgentRole::Detective, 6)]), &Checklist::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientPairs {
                role: AgentRole::Detective,
                requested: 6,
                available: 4
            }
        ));
    }

    #[test]
    fn analyst_targets_come_from_tags() {
        let (qs, idx, qr) = setup();
        let pos = positive_pairs(&qs, &idx, &qr).unwrap();
        let captions = HashMap::new();
        let src = SftSource {
            queries: &qs,
            index: &idx,
            negatives: &[],
            positives: &pos,
            captions: &captions,
        };
        let (recs, summary) =
            emit_sft_dataset(&src, &quota(&[(AgentRole::Analyst, 2)]), &Checklist::default()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].expected_response, "gender: male\naction: falling");
        assert_eq!(recs[1].expected_response, "action: running");
        for r in &recs {
            assert!(!parse_checklist(&r.expected_response, &Checklist::default()).is_empty());
        }
        assert_eq!(summary.needs_annotation, 0);
    }

    #[test]
    fn writer_needs_captions() {
        let (qs, idx, qr) = setup();
        let pos = positive_pairs(&qs, &idx, &qr).unwrap();
        let none = HashMap::new();
        let src = SftSource {
            queries: &qs,
            index: &idx,
            negatives: &[],
            positives: &pos,
            captions: &none,
        };
        assert!(matches!(
            emit_sft_dataset(&src, &quota(&[(AgentRole::Writer, 1)]), &Checklist::default()),
            Err(Error::InsufficientPairs {
                role: AgentRole::Writer,
                available: 0,
                ..
            })
        ));
        let captions = HashMap::from([("g3".to_string(), "a man running".to_string())]);
        let src = SftSource {
            captions: &captions,
            ..src
        };
        let (recs, _) = emit_sft_dataset(&src, &quota(&[(AgentRole::Writer, 1)]), &Checklist::default()).unwrap();
        assert_eq!(recs[0].expected_response, "a man running");
        assert!(recs[0].instruction.contains("action: running"));
    }

    #[test]
    fn default_quotas_split_in_thirds() {
        let q = MiningConfig::default().quotas();
        assert_eq!(q.values().sum::<usize>(), 9000);
        assert_eq!(q[&AgentRole::Writer], 3000);
        let q = MiningConfig {
            total_target: 7,
            ..Default::default()
        }
        .quotas();
        assert_eq!(
            (q[&AgentRole::Detective], q[&AgentRole::Analyst], q[&AgentRole::Writer]),
            (3, 2, 2)
        );
    }
}
