//! Recall@K / mAP evaluation, per-condition reports and parameter sweeps.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::QueryRanking;
use crate::manifest::{Qrels, Tags};
use crate::pipeline::{Cascade, CascadeParams, ScoredCandidate};
use crate::retriever::CandidatePool;
use crate::squad::SquadConfig;

/// Cut-offs reported by [`EvalMetrics`].
pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

/// 1 if any relevant id appears in the first `k` positions, else 0.
pub fn recall_at_k<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyRelevant(String::new()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let hit = ranking.iter().take(k).any(|id| relevant.contains(id.as_ref()));
    Ok(if hit { 1.0 } else { 0.0 })
}

/// Mean precision at the rank of each relevant item. Relevant items missing
/// from the ranking contribute zero.
pub fn average_precision<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyRelevant(String::new()));
    }
    let mut hits = 0usize;
    let mut seen = BTreeSet::new();
    let mut sum = 0.0;
    for (i, id) in ranking.iter().enumerate() {
        let id = id.as_ref();
        if relevant.contains(id) && seen.insert(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub query_count: usize,
}

impl EvalMetrics {
    pub fn r_at(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.r1),
            5 => Some(self.r5),
            10 => Some(self.r10),
            _ => None,
        }
    }

    fn mean_of(rows: &[EvalMetrics], query_count: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&EvalMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            r1: avg(|m| m.r1),
            r5: avg(|m| m.r5),
            r10: avg(|m| m.r10),
            map: avg(|m| m.map),
            query_count,
        }
    }
}

/// A ranked list of item ids for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<'a> {
    pub query_id: &'a str,
    pub items: Vec<&'a str>,
}

impl<'a> From<&'a QueryRanking> for RankedList<'a> {
    fn from(r: &'a QueryRanking) -> Self {
        Self {
            query_id: &r.query_id,
            items: r.item_ids(),
        }
    }
}

impl<'a> From<&'a CandidatePool> for RankedList<'a> {
    fn from(p: &'a CandidatePool) -> Self {
        Self {
            query_id: &p.query_id,
            items: p.item_ids(),
        }
    }
}

pub fn lists<'a, T>(rankings: &'a [T]) -> Vec<RankedList<'a>>
where
    &'a T: Into<RankedList<'a>>,
{
    rankings.iter().map(Into::into).collect()
}

fn query_metrics(list: &RankedList<'_>, qrels: &Qrels) -> Result<EvalMetrics> {
    let relevant = qrels
        .get(list.query_id)
        .ok_or_else(|| Error::MissingQrels(list.query_id.to_string()))?;
    let tag = |e| match e {
        Error::EmptyRelevant(_) => Error::EmptyRelevant(list.query_id.to_string()),
        other => other,
    };
    Ok(EvalMetrics {
        r1: recall_at_k(&list.items, relevant, 1).map_err(tag)?,
        r5: recall_at_k(&list.items, relevant, 5).map_err(tag)?,
        r10: recall_at_k(&list.items, relevant, 10).map_err(tag)?,
        map: average_precision(&list.items, relevant).map_err(tag)?,
        query_count: 1,
    })
}

/// Per-query metrics sorted by query id, so aggregation never depends on
/// input order.
fn per_query(lists: &[RankedList<'_>], qrels: &Qrels) -> Result<Vec<(String, EvalMetrics)>> {
    let mut rows = lists
        .iter()
        .map(|l| Ok((l.query_id.to_string(), query_metrics(l, qrels)?)))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(rows)
}

/// Arithmetic mean of per-query metrics.
pub fn evaluate(lists: &[RankedList<'_>], qrels: &Qrels) -> Result<EvalMetrics> {
    let rows: Vec<EvalMetrics> = per_query(lists, qrels)?.into_iter().map(|r| r.1).collect();
    Ok(EvalMetrics::mean_of(&rows, rows.len()))
}

/// Metrics per value of one query tag, plus an unweighted mean row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub tag: String,
    pub conditions: BTreeMap<String, EvalMetrics>,
    pub mean: EvalMetrics,
}

pub fn evaluate_grouped(
    lists: &[RankedList<'_>],
    qrels: &Qrels,
    tag: &str,
    query_tags: &HashMap<String, Tags>,
) -> Result<ConditionReport> {
    let mut groups: BTreeMap<String, Vec<EvalMetrics>> = BTreeMap::new();
    for (query_id, m) in per_query(lists, qrels)? {
        let value = query_tags
            .get(&query_id)
            .and_then(|t| t.get(tag))
            .ok_or_else(|| Error::UnknownTag {
                tag: tag.to_string(),
                query_id: query_id.clone(),
            })?;
        groups.entry(value.clone()).or_default().push(m);
    }
    let conditions: BTreeMap<String, EvalMetrics> = groups
        .into_iter()
        .map(|(k, rows)| (k, EvalMetrics::mean_of(&rows, rows.len())))
        .collect();
    let per_condition: Vec<EvalMetrics> = conditions.values().copied().collect();
    let total = per_condition.iter().map(|m| m.query_count).sum();
    Ok(ConditionReport {
        tag: tag.to_string(),
        mean: EvalMetrics::mean_of(&per_condition, total),
        conditions,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Aligned-column table, metrics in percent.
pub fn metrics_table(metrics: &EvalMetrics) -> String {
    table(&[("all".to_string(), *metrics)], "set")
}

pub fn condition_table(report: &ConditionReport) -> String {
    let mut rows: Vec<(String, EvalMetrics)> = report.conditions.iter().map(|(k, v)| (k.clone(), *v)).collect();
    rows.push(("Mean".to_string(), report.mean));
    table(&rows, &report.tag)
}

fn table(rows: &[(String, EvalMetrics)], first: &str) -> String {
    let width = rows.iter().map(|r| r.0.len()).chain([first.len()]).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{first:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
        "R@1", "R@5", "R@10", "mAP", "queries"
    );
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{name:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
            pct(m.r1),
            pct(m.r5),
            pct(m.r10),
            pct(m.map),
            m.query_count
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub xis: Vec<f64>,
    pub rounds: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub xi: f64,
    pub rounds: u32,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Grid points whose `(ξ, rounds)` verification had to be run.
    pub verification_runs: usize,
    /// Grid points that reused an earlier verification.
    pub cache_hits: usize,
}

/// Evaluates every `(λ, ξ, rounds)` combination. Retrieval runs once;
/// verification runs once per distinct `(ξ, rounds)`; only fusion and
/// evaluation repeat per λ.
pub fn sweep(cascade: &Cascade<'_>, base: &CascadeParams, grid: &SweepGrid, qrels: &Qrels) -> Result<SweepReport> {
    if grid.lambdas.is_empty() || grid.xis.is_empty() || grid.rounds.is_empty() {
        return Err(Error::InvalidConfig("sweep grids must be non-empty".into()));
    }
    let mut points = Vec::new();
    for &lambda in &grid.lambdas {
        for &xi in &grid.xis {
            for &rounds in &grid.rounds {
                let params = CascadeParams {
                    lambda,
                    squad: SquadConfig {
                        xi,
                        rounds,
                        ..base.squad.clone()
                    },
                    ..base.clone()
                };
                params.validate()?;
                points.push(params);
            }
        }
    }

    let pools = cascade.retrieve(base.k)?;
    let mut cache: HashMap<(u64, u32), Vec<Vec<ScoredCandidate>>> = HashMap::new();
    let mut report = SweepReport {
        rows: Vec::with_capacity(points.len()),
        verification_runs: 0,
        cache_hits: 0,
    };
    for params in points {
        let key = (params.squad.xi.to_bits(), params.squad.rounds);
        let scored = match cache.entry(key) {
            Entry::Occupied(e) => {
                report.cache_hits += 1;
                e.into_mut()
            }
            Entry::Vacant(e) => {
                report.verification_runs += 1;
                e.insert(cascade.score(&cascade.verify(&pools, &params.squad)))
            }
        };
        let rankings = cascade.fuse(&pools, scored, params.lambda)?;
        let m = evaluate(&lists(&rankings), qrels)?;
        report.rows.push(SweepRow {
            lambda: params.lambda,
            xi: params.squad.xi,
            rounds: params.squad.rounds,
            r1: m.r1,
            r5: m.r5,
            r10: m.r10,
            map: m.map,
        });
    }
    Ok(report)
}

/// CSV with header `lambda,xi,rounds,r1,r5,r10,map`.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::io("sweep.csv", std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io("sweep.csv", e))
}
