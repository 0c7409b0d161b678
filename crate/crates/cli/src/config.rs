//! Run configuration: a TOML file merged with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use squadrank_core::agent::AgentBackendConfig;
use squadrank_core::fusion::EmbedderConfig;
use squadrank_core::{AgentRole, CascadeParams, Checklist, MiningConfig, SquadConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub data: DataSection,
    pub retrieval: RetrievalSection,
    pub squad: SquadSection,
    pub fusion: FusionSection,
    pub backend: Option<AgentBackendConfig>,
    pub embedder: Option<EmbedderConfig>,
    pub mining: MiningSection,
    pub sweep: SweepSection,
    pub eval: EvalSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub gallery: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    /// JSONL of `{"item_id", "caption"}` reference captions.
    pub captions: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SquadSection {
    pub xi: Option<f64>,
    pub rounds: Option<u32>,
    pub checklist: Option<Vec<String>>,
    pub include_query_in_writer: Option<bool>,
    pub gate_on_raw: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub lambda: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSection {
    pub k_mine: Option<usize>,
    pub total_target: Option<usize>,
    pub seed: Option<u64>,
    pub quota: Option<BTreeMap<AgentRole, usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Option<Vec<f64>>,
    pub xis: Option<Vec<f64>>,
    pub rounds: Option<Vec<u32>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub group_by: Option<String>,
}

/// Values given on the command line. Every field wins over the config file.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Gallery manifest (JSONL).
    #[arg(long, global = true)]
    pub gallery: Option<PathBuf>,
    /// Query manifest (JSONL).
    #[arg(long, global = true)]
    pub queries: Option<PathBuf>,
    /// Relevance judgments (JSONL).
    #[arg(long, global = true)]
    pub qrels: Option<PathBuf>,
    /// Reference captions (JSONL) used by `mine`.
    #[arg(long, global = true)]
    pub captions: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Candidate pool size.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Gate threshold in [0, 1].
    #[arg(long, global = true)]
    pub xi: Option<f64>,
    /// Verification rounds.
    #[arg(long, global = true)]
    pub rounds: Option<u32>,
    /// Structural weight in [0, 1].
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Scripted agent responses (JSONL); selects the scripted backend.
    #[arg(long, global = true)]
    pub agents: Option<PathBuf>,
    /// Gate on raw cosine instead of the pool-normalized score.
    #[arg(long, global = true)]
    pub gate_on_raw: bool,
    /// Show the query text to the Writer.
    #[arg(long, global = true)]
    pub include_query_in_writer: bool,
    /// Comma-separated checklist keys replacing the default fifteen.
    #[arg(long, global = true, value_delimiter = ',')]
    pub checklist: Option<Vec<String>>,
    /// Report metrics per value of this query tag.
    #[arg(long, global = true)]
    pub group_by: Option<String>,
    /// Sampling seed for `mine`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

/// Configuration or usage problem, reported before any output is written.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

/// Fully merged and validated settings.
#[derive(Debug)]
pub struct Settings {
    pub out_dir: PathBuf,
    pub workers: Option<usize>,
    pub gallery: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub params: CascadeParams,
    pub backend: Option<AgentBackendConfig>,
    pub embedder: EmbedderConfig,
    pub mining: MiningConfig,
    pub sweep: SweepSection,
    pub group_by: Option<String>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn unit_interval(name: &str, v: f64) -> Result<f64, UsageError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(usage(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl Settings {
    pub fn load(o: &Overrides) -> Result<Self, UsageError> {
        let (cfg, base) = match &o.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
                let cfg: RunConfig =
                    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (cfg, base)
            }
            None => (RunConfig::default(), PathBuf::new()),
        };
        let from_cfg = |p: Option<PathBuf>| p.map(|p| resolve(&base, p));

        let mut squad = SquadConfig::default();
        if let Some(xi) = o.xi.or(cfg.squad.xi) {
            squad.xi = unit_interval("xi", xi)?;
        }
        if let Some(r) = o.rounds.or(cfg.squad.rounds) {
            squad.rounds = r;
        }
        if let Some(keys) = o.checklist.clone().or(cfg.squad.checklist) {
            squad.checklist = Checklist::new(keys).map_err(|e| usage(e.to_string()))?;
        }
        squad.include_query_in_writer = o.include_query_in_writer || cfg.squad.include_query_in_writer.unwrap_or(false);
        squad.gate_on_raw = o.gate_on_raw || cfg.squad.gate_on_raw.unwrap_or(false);

        let mut params = CascadeParams {
            squad,
            ..CascadeParams::default()
        };
        if let Some(k) = o.k.or(cfg.retrieval.k) {
            params.k = k;
        }
        if let Some(l) = o.lambda.or(cfg.fusion.lambda) {
            params.lambda = unit_interval("lambda", l)?;
        }
        params.validate().map_err(|e| usage(e.to_string()))?;

        let backend = match (&o.agents, cfg.backend) {
            (Some(path), _) => Some(AgentBackendConfig::scripted(path.clone())),
            (None, Some(mut b)) => {
                b.fixture_path = from_cfg(b.fixture_path);
                Some(b)
            }
            (None, None) => None,
        };
        if let Some(b) = &backend {
            b.validate().map_err(|e| usage(e.to_string()))?;
        }
        let mut embedder = cfg.embedder.unwrap_or_default();
        embedder.fixture_path = from_cfg(embedder.fixture_path);
        embedder.validate().map_err(|e| usage(e.to_string()))?;

        let mut mining = MiningConfig::default();
        if let Some(k) = cfg.mining.k_mine {
            mining.k_mine = k;
        }
        if let Some(t) = cfg.mining.total_target {
            mining.total_target = t;
        }
        mining.per_role_quota = cfg.mining.quota;
        mining.seed = o.seed.or(cfg.mining.seed).unwrap_or(0);
        if mining.k_mine == 0 {
            return Err(usage("mining.k_mine must be at least 1"));
        }

        let workers = o.workers.or(cfg.workers);
        if workers == Some(0) {
            return Err(usage("workers must be at least 1"));
        }
        if let Some(xis) = &cfg.sweep.xis {
            for xi in xis {
                unit_interval("sweep xi", *xi)?;
            }
        }
        if let Some(ls) = &cfg.sweep.lambdas {
            for l in ls {
                unit_interval("sweep lambda", *l)?;
            }
        }

        let settings = Self {
            out_dir: o
                .out
                .clone()
                .or_else(|| from_cfg(cfg.out_dir))
                .unwrap_or_else(|| PathBuf::from(".")),
            workers,
            gallery: o.gallery.clone().or_else(|| from_cfg(cfg.data.gallery)),
            queries: o.queries.clone().or_else(|| from_cfg(cfg.data.queries)),
            qrels: o.qrels.clone().or_else(|| from_cfg(cfg.data.qrels)),
            captions: o.captions.clone().or_else(|| from_cfg(cfg.data.captions)),
            params,
            backend,
            embedder,
            mining,
            sweep: cfg.sweep,
            group_by: o.group_by.clone().or(cfg.eval.group_by),
        };
        for (name, path) in [
            ("gallery", &settings.gallery),
            ("queries", &settings.queries),
            ("qrels", &settings.qrels),
            ("captions", &settings.captions),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(usage(format!("{name} file not found: {}", p.display())));
                }
            }
        }
        if let Some(p) = settings.backend.as_ref().and_then(|b| b.fixture_path.as_ref()) {
            if !p.exists() {
                return Err(usage(format!("agent fixture not found: {}", p.display())));
            }
        }
        Ok(settings)
    }

    pub fn require<'a>(&self, name: &str, path: &'a Option<PathBuf>) -> Result<&'a Path, UsageError> {
        path.as_deref()
            .ok_or_else(|| usage(format!("--{name} is required (or set data.{name} in the config)")))
    }

    pub fn require_backend(&self) -> Result<&AgentBackendConfig, UsageError> {
        self.backend
            .as_ref()
            .ok_or_else(|| usage("an agent backend is required: pass --agents or add a [backend] section"))
    }
}
