mod common;

use std::collections::HashMap;

use common::{embedder, perfect_agent_fixture, random_fixture};
use squadrank_core::eval::{evaluate_grouped, lists};
use squadrank_core::manifest::{read_jsonl, write_jsonl};
use squadrank_core::{
    sweep, AgentRole, Branch, Cascade, CascadeParams, Outcome, QueryRanking, ScriptedBackend, SquadConfig, SweepGrid,
    Tags, VerificationTranscript,
};

fn params(lambda: f64, xi: f64) -> CascadeParams {
    CascadeParams {
        lambda,
        squad: SquadConfig {
            xi,
            ..SquadConfig::default()
        },
        ..CascadeParams::default()
    }
}

#[test]
fn failed_agents_fall_back_to_structural_score() {
    let f = perfect_agent_fixture();
    // No script at all: every gated candidate degrades.
    let backend = ScriptedBackend::new(Vec::new());
    let emb = embedder();
    let cascade = Cascade {
        index: &f.index,
        queries: &f.queries,
        backend: &backend,
        embedder: &emb,
    };
    let run = cascade.run(&params(0.4, 0.0)).unwrap();
    assert_eq!(run.pools[0].item_ids(), run.rankings[0].item_ids());
    for (t, s) in run.transcripts[0].iter().zip(&run.rankings[0].ranking) {
        assert!(t.degraded_cause.is_some() || t.outcome == Outcome::Skipped);
        assert_eq!(s.branch, Branch::StructuralOnly);
    }
    assert_eq!(backend.calls(AgentRole::Analyst), 0);
}

#[test]
fn rejected_candidates_drop_below_structural_peers() {
    let mut f = perfect_agent_fixture();
    for s in &mut f.script {
        if s.role == AgentRole::Detective && s.image_ref.contains("g1") {
            s.response = "No".into();
        }
    }
    let backend = f.backend();
    let emb = embedder();
    let cascade = Cascade {
        index: &f.index,
        queries: &f.queries,
        backend: &backend,
        embedder: &emb,
    };
    let run = cascade.run(&params(0.4, 0.0)).unwrap();
    let g1 = run.rankings[0].ranking.iter().find(|s| s.item_id == "g1").unwrap();
    assert_eq!(g1.outcome, Outcome::Rejected);
    assert!((g1.s_final - 0.4).abs() < 1e-12);
}

#[test]
fn sweep_reuses_verification_across_lambdas() {
    let f = random_fixture(5, false);
    let backend = f.backend();
    let emb = embedder();
    let cascade = Cascade {
        index: &f.index,
        queries: &f.queries,
        backend: &backend,
        embedder: &emb,
    };
    let grid = SweepGrid {
        lambdas: vec![0.0, 0.2, 0.4, 0.6],
        xis: vec![0.5, 0.9],
        rounds: vec![1, 2],
    };
    let report = sweep(&cascade, &CascadeParams::default(), &grid, &f.qrels).unwrap();
    assert_eq!(report.rows.len(), 16);
    assert_eq!(report.verification_runs, 4);
    assert_eq!(report.cache_hits, 12);

    // Each row matches a standalone run with the same parameters.
    for row in &report.rows {
        let mut p = params(row.lambda, row.xi);
        p.squad.rounds = row.rounds;
        let run = cascade.run(&p).unwrap();
        let m = squadrank_core::evaluate(&lists(&run.rankings), &f.qrels).unwrap();
        assert_eq!((m.r1, m.r5, m.r10, m.map), (row.r1, row.r5, row.r10, row.map));
    }
}

#[test]
fn outputs_round_trip_through_jsonl() {
    let f = random_fixture(11, false);
    let backend = f.backend();
    let emb = embedder();
    let run = Cascade {
        index: &f.index,
        queries: &f.queries,
        backend: &backend,
        embedder: &emb,
    }
    .run(&params(0.4, 0.2))
    .unwrap();
    let dir = tempfile::tempdir().unwrap();

    let path = dir.path().join("transcripts.jsonl");
    write_jsonl(&path, run.transcripts.iter().flatten()).unwrap();
    let back: Vec<VerificationTranscript> = read_jsonl(&path).unwrap().into_iter().map(|r| r.1).collect();
    assert_eq!(back, run.transcripts.concat());

    let path = dir.path().join("rankings.jsonl");
    write_jsonl(&path, &run.rankings).unwrap();
    let back: Vec<QueryRanking> = read_jsonl(&path).unwrap().into_iter().map(|r| r.1).collect();
    for (a, b) in back.iter().zip(&run.rankings) {
        assert_eq!(a.item_ids(), b.item_ids());
    }
}

#[test]
fn grouped_mean_weights_conditions_equally() {
    let f = random_fixture(21, true);
    let backend = f.backend();
    let emb = embedder();
    let run = Cascade {
        index: &f.index,
        queries: &f.queries,
        backend: &backend,
        embedder: &emb,
    }
    .run(&params(0.4, 0.5))
    .unwrap();
    let tags: HashMap<String, Tags> = f.queries.iter().map(|q| (q.query_id.clone(), q.tags.clone())).collect();
    let report = evaluate_grouped(&lists(&run.rankings), &f.qrels, "condition", &tags).unwrap();
    let n = report.conditions.len() as f64;
    let mean_r1: f64 = report.conditions.values().map(|m| m.r1).sum::<f64>() / n;
    assert!((report.mean.r1 - mean_r1).abs() < 1e-12);
    assert_eq!(report.mean.query_count, f.queries.len());
    assert!(evaluate_grouped(&lists(&run.rankings), &f.qrels, "weather", &tags).is_err());
}
