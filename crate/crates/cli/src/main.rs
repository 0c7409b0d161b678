mod config;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use squadrank_core::eval::{condition_table, lists, metrics_table, write_sweep_csv, ConditionReport, RankedList};
use squadrank_core::manifest::{read_jsonl, write_json, write_jsonl};
use squadrank_core::miner::{positive_pairs, SftSource};
use squadrank_core::pipeline::{fuse_pool, retrieve_all, score_transcripts, with_workers};
use squadrank_core::{
    emit_sft_dataset, evaluate, evaluate_grouped, load_gallery, load_qrels, load_queries, mine_hard_negatives,
    run_squad, sweep, CandidatePool, Cascade, EvalMetrics, GalleryIndex, Qrels, QueryRanking, QueryRecord, SweepGrid,
    Tags, VerificationTranscript,
};

use config::{Overrides, Settings, UsageError};

#[derive(Parser)]
#[command(
    name = "squadrank",
    version,
    about = "Structure-first retrieval with gated agent verification"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the gallery, then write index.json.
    Index,
    /// Retrieve the top-K candidate pool per query into pools.jsonl.
    Retrieve,
    /// Run the agent squad over candidate pools into transcripts.jsonl.
    Verify {
        /// Existing pools.jsonl; retrieval runs first when omitted.
        #[arg(long)]
        pools: Option<PathBuf>,
    },
    /// Fuse pools with transcripts into rankings.jsonl.
    Rerank {
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
    },
    /// Score rankings (or coarse pools) against qrels into metrics.json.
    Evaluate {
        #[arg(long, conflicts_with = "pools")]
        rankings: Option<PathBuf>,
        #[arg(long)]
        pools: Option<PathBuf>,
    },
    /// Evaluate a grid of (lambda, xi, rounds) into sweep.csv.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        xis: Option<Vec<f64>>,
        #[arg(long = "rounds-grid", value_delimiter = ',')]
        rounds_grid: Option<Vec<u32>>,
    },
    /// Mine hard negatives and emit an SFT dataset into sft.jsonl.
    Mine {
        /// Retrieval depth for hard negatives.
        #[arg(long)]
        k_mine: Option<usize>,
        /// Total records, split evenly across roles.
        #[arg(long)]
        total: Option<usize>,
    },
    /// Retrieve, verify, fuse and (with qrels) evaluate in one go.
    Pipeline {
        /// Also write transcripts.jsonl.
        #[arg(long)]
        transcripts: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.downcast_ref::<UsageError>().is_some()
        || matches!(
            e.downcast_ref::<squadrank_core::Error>(),
            Some(squadrank_core::Error::InvalidConfig(_))
        )
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::load(&cli.overrides)?;
    if let Command::Mine { k_mine, total } = &cli.command {
        if let Some(k) = *k_mine {
            anyhow::ensure!(k > 0, UsageError("--k-mine must be at least 1".into()));
            settings.mining.k_mine = k;
        }
        if let Some(t) = *total {
            settings.mining.total_target = t;
            settings.mining.per_role_quota = None;
        }
    }
    let s = &settings;
    with_workers(s.workers, move || match cli.command {
        Command::Index => index(s),
        Command::Retrieve => retrieve(s),
        Command::Verify { pools } => verify(s, pools.as_deref()),
        Command::Rerank { pools, transcripts } => rerank(s, &pools, &transcripts),
        Command::Evaluate { rankings, pools } => evaluate_cmd(s, rankings.as_deref(), pools.as_deref()),
        Command::Sweep {
            lambdas,
            xis,
            rounds_grid,
        } => sweep_cmd(s, lambdas, xis, rounds_grid),
        Command::Mine { .. } => mine(s),
        Command::Pipeline { transcripts } => pipeline(s, transcripts),
    })?
}

fn gallery(s: &Settings) -> Result<GalleryIndex> {
    Ok(load_gallery(s.require("gallery", &s.gallery)?)?)
}

fn queries(s: &Settings) -> Result<Vec<QueryRecord>> {
    Ok(load_queries(s.require("queries", &s.queries)?)?)
}

fn out_path(s: &Settings, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&s.out_dir).with_context(|| format!("cannot create {}", s.out_dir.display()))?;
    Ok(s.out_dir.join(name))
}

fn read_all<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, r)| r).collect())
}

#[derive(Serialize)]
struct IndexSummary {
    items: usize,
    dimension: Option<usize>,
    zero_norm_items: usize,
}

fn index(s: &Settings) -> Result<()> {
    let g = gallery(s)?;
    let summary = IndexSummary {
        items: g.len(),
        dimension: g.dim(),
        zero_norm_items: g.items().iter().filter(|i| i.embedding.norm() == 0.0).count(),
    };
    write_json(&out_path(s, "index.json")?, &summary)?;
    println!(
        "{} items, dimension {}, {} zero-norm",
        summary.items,
        summary.dimension.map_or("-".into(), |d| d.to_string()),
        summary.zero_norm_items
    );
    Ok(())
}

fn retrieve(s: &Settings) -> Result<()> {
    let (g, q) = (gallery(s)?, queries(s)?);
    let pools = retrieve_all(&g, &q, s.params.k)?;
    let path = out_path(s, "pools.jsonl")?;
    write_jsonl(&path, &pools)?;
    println!("wrote {} pools to {}", pools.len(), path.display());
    Ok(())
}

/// Pools from `path`, reordered to match `q`.
fn read_pools(path: &Path, q: &[QueryRecord]) -> Result<Vec<CandidatePool>> {
    let mut by_query: HashMap<String, CandidatePool> = read_all::<CandidatePool>(path)?
        .into_iter()
        .map(|p| (p.query_id.clone(), p))
        .collect();
    q.iter()
        .map(|query| {
            by_query
                .remove(&query.query_id)
                .with_context(|| format!("{} has no pool for query {:?}", path.display(), query.query_id))
        })
        .collect()
}

fn verify(s: &Settings, pools: Option<&Path>) -> Result<()> {
    let (g, q) = (gallery(s)?, queries(s)?);
    let backend = s.require_backend()?.connect()?;
    let pools = match pools {
        Some(path) => read_pools(path, &q)?,
        None => retrieve_all(&g, &q, s.params.k)?,
    };
    let transcripts: Vec<Vec<VerificationTranscript>> = q
        .iter()
        .zip(&pools)
        .map(|(query, pool)| run_squad(query, pool, &g, &s.params.squad, backend.as_ref()))
        .collect();
    let path = out_path(s, "transcripts.jsonl")?;
    write_jsonl(&path, transcripts.iter().flatten())?;
    let gated = transcripts.iter().flatten().filter(|t| t.gate_activated).count();
    println!("verified {gated} gated candidates; wrote {}", path.display());
    Ok(())
}

fn rerank(s: &Settings, pools: &Path, transcripts: &Path) -> Result<()> {
    let q = queries(s)?;
    let embedder = s.embedder.build()?;
    let pools = read_pools(pools, &q)?;
    let mut by_query: HashMap<String, Vec<VerificationTranscript>> = HashMap::new();
    for t in read_all::<VerificationTranscript>(transcripts)? {
        by_query.entry(t.query_id.clone()).or_default().push(t);
    }
    let rankings = q
        .iter()
        .zip(&pools)
        .map(|(query, pool)| {
            let ts = by_query.remove(&query.query_id).unwrap_or_default();
            let scored = score_transcripts(query, &ts, embedder.as_ref());
            Ok(fuse_pool(pool, &scored, s.params.lambda)?)
        })
        .collect::<Result<Vec<QueryRanking>>>()?;
    let path = out_path(s, "rankings.jsonl")?;
    write_jsonl(&path, &rankings)?;
    println!("wrote {} rankings to {}", rankings.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    #[serde(flatten)]
    overall: &'a EvalMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    grouped: Option<&'a ConditionReport>,
}

fn report_metrics(s: &Settings, qrels: &Qrels, lists: &[RankedList<'_>]) -> Result<()> {
    let overall = evaluate(lists, qrels)?;
    let grouped = match &s.group_by {
        Some(tag) => {
            let tags: HashMap<String, Tags> = queries(s)?.into_iter().map(|q| (q.query_id, q.tags)).collect();
            Some(evaluate_grouped(lists, qrels, tag, &tags)?)
        }
        None => None,
    };
    write_json(
        &out_path(s, "metrics.json")?,
        &MetricsFile {
            overall: &overall,
            grouped: grouped.as_ref(),
        },
    )?;
    print!("{}", metrics_table(&overall));
    if let Some(g) = &grouped {
        println!();
        print!("{}", condition_table(g));
    }
    Ok(())
}

fn evaluate_cmd(s: &Settings, rankings: Option<&Path>, pools: Option<&Path>) -> Result<()> {
    if rankings.is_none() && pools.is_none() {
        return Err(UsageError("evaluate needs --rankings or --pools".into()).into());
    }
    let qrels = load_qrels(s.require("qrels", &s.qrels)?)?;
    match (rankings, pools) {
        (Some(path), _) => {
            let r: Vec<QueryRanking> = read_all(path)?;
            report_metrics(s, &qrels, &lists(&r))
        }
        (None, Some(path)) => {
            let p: Vec<CandidatePool> = read_all(path)?;
            report_metrics(s, &qrels, &lists(&p))
        }
        (None, None) => unreachable!("checked above"),
    }
}

fn sweep_cmd(s: &Settings, lambdas: Option<Vec<f64>>, xis: Option<Vec<f64>>, rounds: Option<Vec<u32>>) -> Result<()> {
    let grid = SweepGrid {
        lambdas: lambdas
            .or_else(|| s.sweep.lambdas.clone())
            .unwrap_or_else(|| vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]),
        xis: xis
            .or_else(|| s.sweep.xis.clone())
            .unwrap_or_else(|| vec![0.85, 0.9, 0.95, 1.0]),
        rounds: rounds.or_else(|| s.sweep.rounds.clone()).unwrap_or_else(|| vec![1, 2]),
    };
    for v in grid.lambdas.iter().chain(&grid.xis) {
        anyhow::ensure!(
            (0.0..=1.0).contains(v),
            UsageError(format!("sweep values must lie in [0, 1], got {v}"))
        );
    }
    let qrels = load_qrels(s.require("qrels", &s.qrels)?)?;
    let (g, q) = (gallery(s)?, queries(s)?);
    let backend = s.require_backend()?.connect()?;
    let embedder = s.embedder.build()?;
    let cascade = Cascade {
        index: &g,
        queries: &q,
        backend: backend.as_ref(),
        embedder: embedder.as_ref(),
    };
    let report = sweep(&cascade, &s.params, &grid, &qrels)?;
    let path = out_path(s, "sweep.csv")?;
    let file = fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    write_sweep_csv(file, &report.rows)?;
    println!(
        "{} grid points ({} verification runs); wrote {}",
        report.rows.len(),
        report.verification_runs,
        path.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct CaptionLine {
    item_id: String,
    caption: String,
}

fn mine(s: &Settings) -> Result<()> {
    let qrels = load_qrels(s.require("qrels", &s.qrels)?)?;
    let (g, q) = (gallery(s)?, queries(s)?);
    let mut captions: HashMap<String, String> = g
        .items()
        .iter()
        .filter_map(|i| i.tags.get("caption").map(|c| (i.item_id.clone(), c.clone())))
        .collect();
    if let Some(path) = &s.captions {
        captions.extend(
            read_all::<CaptionLine>(path)?
                .into_iter()
                .map(|c| (c.item_id, c.caption)),
        );
    }
    let negatives = mine_hard_negatives(&q, &g, &qrels, s.mining.k_mine)?;
    let positives = positive_pairs(&q, &g, &qrels)?;
    let source = SftSource {
        queries: &q,
        index: &g,
        negatives: &negatives,
        positives: &positives,
        captions: &captions,
    };
    let (records, summary) = emit_sft_dataset(&source, &s.mining, &s.params.squad.checklist)?;
    let path = out_path(s, "sft.jsonl")?;
    write_jsonl(&path, &records)?;
    write_json(&out_path(s, "sft_summary.json")?, &summary)?;
    println!(
        "{} records ({} hard negatives mined, {} need annotation); wrote {}",
        records.len(),
        negatives.len(),
        summary.needs_annotation,
        path.display()
    );
    Ok(())
}

fn pipeline(s: &Settings, keep_transcripts: bool) -> Result<()> {
    let (g, q) = (gallery(s)?, queries(s)?);
    let qrels = s.qrels.as_deref().map(load_qrels).transpose()?;
    let backend = s.require_backend()?.connect()?;
    let embedder = s.embedder.build()?;
    let run = Cascade {
        index: &g,
        queries: &q,
        backend: backend.as_ref(),
        embedder: embedder.as_ref(),
    }
    .run(&s.params)?;
    write_jsonl(&out_path(s, "pools.jsonl")?, &run.pools)?;
    write_jsonl(&out_path(s, "rankings.jsonl")?, &run.rankings)?;
    if keep_transcripts {
        write_jsonl(&out_path(s, "transcripts.jsonl")?, run.transcripts.iter().flatten())?;
    }
    if let Some(qrels) = &qrels {
        report_metrics(s, qrels, &lists(&run.rankings))?;
    } else {
        println!("wrote {} rankings to {}", run.rankings.len(), s.out_dir.display());
    }
    Ok(())
}
