//! Command-line driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::catalog::{leave_one_out, load_catalog_with, load_items, write_catalog, Catalog, EvalSplit, ItemId};
use crate::config::Config;
use crate::copurchase::{build_index_with, read_index, write_index, CoPurchaseIndex};
use crate::embedding::{load_embeddings, write_embeddings, EmbeddingStore};
use crate::evaluation::{evaluate_candidates, make_cold_start, sample_candidates_with, sample_users, CandidateSet, EvalReport};
use crate::llm::{HttpConfig, HttpLlmClient, LlmClient, RecordingClient, ReplayClient};
use crate::mock::MockLlm;
use crate::pipeline::{ItemRagPipeline, Mode};
use crate::retrieval::{write_retrieval_dump, RetrievalConfig, RetrievalEngine};
use crate::summarizer::SummaryCache;

const EMBED_BATCH: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "itemrag", version, about = "Co-purchase retrieval and summarization for LLM ranking")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use the scripted mock LLM instead of the HTTP endpoint.
    #[arg(long, global = true, value_name = "SCRIPT")]
    pub mock_llm: Option<PathBuf>,
    /// Serve LLM responses from a transcript recorded with `--record`.
    #[arg(long, global = true, conflicts_with = "mock_llm")]
    pub replay: Option<PathBuf>,
    /// Append every LLM exchange to this transcript.
    #[arg(long, global = true)]
    pub record: Option<PathBuf>,
    /// Pool from co-purchases of the query item only.
    #[arg(long, global = true)]
    pub no_sim_items: bool,
    /// Sample the pool uniformly.
    #[arg(long, global = true)]
    pub no_cofreq_weights: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Interactions JSONL.
    #[arg(long)]
    pub interactions: PathBuf,
    /// Items JSONL.
    #[arg(long)]
    pub items: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Prebuilt index dump; built in memory when omitted.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Item embeddings JSONL; without it no similar items are used.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Use the cold-start training split.
    #[arg(long)]
    pub cold: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Prebuilt index dump; built in memory when omitted.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Summary cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-user ranking dump.
    #[arg(long)]
    pub rankings: Option<PathBuf>,
    /// Rank plain descriptions without summaries.
    #[arg(long)]
    pub zero_shot: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate input files and print catalog statistics.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        /// Write the normalized catalog here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Build the co-purchase index from the training split.
    BuildIndex {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Remove the evaluation users' target items from training first.
        #[arg(long)]
        cold: bool,
    },
    /// Validate an embeddings file, optionally fetching it first.
    EmbedLoad {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        /// Fetch embeddings for `--items` from the endpoint and write them.
        #[arg(long, requires = "items")]
        fetch: bool,
        #[arg(long)]
        items: Option<PathBuf>,
        /// Dump the top-k similar items of every item.
        #[arg(long)]
        similar_out: Option<PathBuf>,
    },
    /// Retrieve and sample co-purchased items for every catalog item.
    Retrieve {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize co-purchases of every catalog item into a cache file.
    Summarize {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        cache: PathBuf,
    },
    /// Leave-one-out ranking evaluation.
    Eval(EvalArgs),
    /// Evaluation with the sampled users' target items removed from training.
    EvalCold(EvalArgs),
}

/// Config file plus command-line overrides.
pub fn resolve_config(global: &GlobalArgs) -> Result<Config> {
    let mut cfg = match &global.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if global.no_sim_items {
        cfg.use_sim_items = false;
    }
    if global.no_cofreq_weights {
        cfg.use_cofreq_weights = false;
    }
    Ok(cfg)
}

/// Retrieval settings after config file and flag overrides.
pub fn retrieval_config(global: &GlobalArgs) -> Result<RetrievalConfig> {
    Ok(resolve_config(global)?.retrieval())
}

fn build_llm(global: &GlobalArgs, cfg: &Config) -> Result<Box<dyn LlmClient>> {
    let client: Box<dyn LlmClient> = if let Some(path) = &global.replay {
        let replay = ReplayClient::load(path, cfg.model.clone()).with_context(|| format!("loading {}", path.display()))?;
        Box::new(replay)
    } else if let Some(path) = &global.mock_llm {
        Box::new(MockLlm::from_file(path)?)
    } else {
        Box::new(HttpLlmClient::new(http_config(cfg)?)?)
    };
    Ok(match &global.record {
        Some(path) => Box::new(RecordingClient::new(client, path).with_context(|| format!("opening {}", path.display()))?),
        None => client,
    })
}

fn http_config(cfg: &Config) -> Result<HttpConfig> {
    let mut http = HttpConfig::from_env(cfg.model.clone())?;
    http.timeout = Duration::from_secs(cfg.timeout_secs);
    http.retry = cfg.retry_policy();
    http.max_in_flight = cfg.max_in_flight;
    Ok(http)
}

fn load(data: &DataArgs, cfg: &Config) -> Result<Catalog> {
    Ok(load_catalog_with(&data.interactions, &data.items, cfg.load_options())?)
}

fn train_split(catalog: &Catalog, cold: bool, cfg: &Config) -> Catalog {
    let split = leave_one_out(catalog);
    if cold {
        cold_train(&split, cfg)
    } else {
        split.train
    }
}

/// Training data with the targets of the sampled evaluation users made cold.
pub fn cold_train(split: &EvalSplit, cfg: &Config) -> Catalog {
    let users = sample_users(split, cfg.eval_users, cfg.seed);
    let sampled = EvalSplit {
        train: split.train.clone(),
        targets: users.iter().map(|u| (u.clone(), split.targets[u].clone())).collect(),
    };
    make_cold_start(&sampled).train
}

fn index_for(train: &Catalog, path: Option<&Path>, cfg: &Config) -> Result<CoPurchaseIndex> {
    let options = cfg.index_options();
    let Some(path) = path else {
        return Ok(build_index_with(train, options));
    };
    let index = read_index(path)?;
    if index.config_hash() != options.config_hash() || index.users_processed() != train.n_users() {
        bail!(
            "index {} was built from other data or settings ({} users, expected {})",
            path.display(),
            index.users_processed(),
            train.n_users()
        );
    }
    Ok(index)
}

fn store_for(path: Option<&Path>, cfg: &Config) -> Result<Option<EmbeddingStore>> {
    match path {
        Some(p) => Ok(Some(load_embeddings(p, None)?)),
        None => {
            if cfg.use_sim_items && cfg.k > 0 {
                tracing::warn!("no embeddings given; similar items are disabled");
            }
            Ok(None)
        }
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Ingest { data, out_dir } => ingest(&data, out_dir.as_deref(), &cfg),
        Command::BuildIndex { data, out, cold } => {
            let train = train_split(&load(&data, &cfg)?, cold, &cfg);
            let index = build_index_with(&train, cfg.index_options());
            write_index(&index, &out)?;
            print_json(&serde_json::json!({
                "users": index.users_processed(),
                "pairs": index.n_pairs(),
                "content_hash": index.content_hash(),
            }))
        }
        Command::EmbedLoad {
            embeddings,
            dim,
            fetch,
            items,
            similar_out,
        } => {
            if fetch {
                let items = items.expect("clap enforces --items with --fetch");
                fetch_embeddings(&items, &embeddings, &cfg)?;
            }
            let store = load_embeddings(&embeddings, dim)?;
            if let Some(path) = similar_out {
                let ids: Vec<ItemId> = store.item_ids().cloned().collect();
                let sets = store.top_k_batch(&ids, cfg.k)?;
                write_jsonl(&path, &sets)?;
            }
            print_json(&serde_json::json!({
                "items": store.len(),
                "dim": store.dim(),
                "model_tag": store.model_tag(),
            }))
        }
        Command::Retrieve { data, model, out } => {
            let train = train_split(&load(&data, &cfg)?, model.cold, &cfg);
            let index = index_for(&train, model.index.as_deref(), &cfg)?;
            let store = store_for(model.embeddings.as_deref(), &cfg)?;
            let rcfg = cfg.retrieval();
            let engine = RetrievalEngine::new(&index, store.as_ref(), rcfg)?;
            let queries: Vec<ItemId> = train.item_ids().cloned().collect();
            let results = engine.retrieve_all(&queries);
            write_retrieval_dump(&out, &rcfg, &results)?;
            print_json(&serde_json::json!({"queries": results.len(), "config_hash": rcfg.config_hash()}))
        }
        Command::Summarize { data, model, cache } => {
            let train = train_split(&load(&data, &cfg)?, model.cold, &cfg);
            let index = index_for(&train, model.index.as_deref(), &cfg)?;
            let store = store_for(model.embeddings.as_deref(), &cfg)?;
            let llm = build_llm(&cli.global, &cfg)?;
            let cache = SummaryCache::open(&cache);
            let pipeline = ItemRagPipeline::new(&train, &index, store.as_ref(), cfg.retrieval(), &cache, llm.as_ref())?;
            let items: Vec<ItemId> = train.item_ids().cloned().collect();
            let summaries = pipeline.summarize_all(&items)?;
            let empty = summaries.iter().filter(|s| s.is_empty_sentinel()).count();
            print_json(&serde_json::json!({
                "items": summaries.len(),
                "empty": empty,
                "config_hash": pipeline.summary_hash(),
            }))
        }
        Command::Eval(args) => eval(&cli.global, &cfg, &args, false),
        Command::EvalCold(args) => eval(&cli.global, &cfg, &args, true),
    }
}

fn ingest(data: &DataArgs, out_dir: Option<&Path>, cfg: &Config) -> Result<()> {
    let catalog = load(data, cfg)?;
    let split = leave_one_out(&catalog);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_catalog(&catalog, &dir.join("interactions.jsonl"), &dir.join("items.jsonl"))?;
    }
    print_json(&serde_json::json!({
        "items": catalog.n_items(),
        "users": catalog.n_users(),
        "interactions": catalog.n_interactions(),
        "eval_users": split.targets.len(),
    }))
}

fn fetch_embeddings(items_path: &Path, out: &Path, cfg: &Config) -> Result<()> {
    let items = load_items(items_path)?;
    let client = HttpLlmClient::new(http_config(cfg)?)?;
    let mut vectors: Vec<(ItemId, Vec<f64>)> = Vec::with_capacity(items.len());
    for chunk in items.chunks(EMBED_BATCH) {
        let texts: Vec<String> = chunk.iter().map(|i| i.description.clone()).collect();
        let embedded = client.embed(&cfg.embedding_model, &texts)?;
        if embedded.len() != chunk.len() {
            bail!("endpoint returned {} vectors for {} texts", embedded.len(), chunk.len());
        }
        vectors.extend(chunk.iter().map(|i| i.id.clone()).zip(embedded));
    }
    let dim = vectors.first().map_or(0, |(_, v)| v.len());
    write_embeddings(out, dim, &cfg.embedding_model, vectors.iter().map(|(id, v)| (id, v.as_slice())))?;
    Ok(())
}

/// Candidate sets for the seeded user sample of the standard split. The
/// cold-start evaluation reuses these so both runs rank the same candidates.
pub fn eval_candidates(split: &EvalSplit, cfg: &Config) -> Result<Vec<CandidateSet>> {
    let users = sample_users(split, cfg.eval_users, cfg.seed);
    Ok(users
        .iter()
        .map(|u| sample_candidates_with(split, u, cfg.seed, cfg.negatives))
        .collect::<Result<_, _>>()?)
}

fn report_config(cfg: &Config, llm: &dyn LlmClient, mode: Mode, cold: bool) -> serde_json::Value {
    serde_json::json!({
        "mode": match mode {
            Mode::ZeroShot => "zero_shot",
            Mode::ItemRag => "itemrag",
        },
        "cold_start": cold,
        "k": cfg.k,
        "n": cfg.n,
        "use_sim_items": cfg.use_sim_items,
        "use_cofreq_weights": cfg.use_cofreq_weights,
        "history_limit": cfg.history_limit,
        "negatives": cfg.negatives,
        "eval_users": cfg.eval_users,
        "model": llm.model_tag(),
    })
}

fn eval(global: &GlobalArgs, cfg: &Config, args: &EvalArgs, cold: bool) -> Result<()> {
    let catalog = load(&args.data, cfg)?;
    let split = leave_one_out(&catalog);
    let candidates = eval_candidates(&split, cfg)?;
    let train = if cold { cold_train(&split, cfg) } else { split.train };

    let index = index_for(&train, args.index.as_deref(), cfg)?;
    let store = store_for(args.embeddings.as_deref(), cfg)?;
    let llm = build_llm(global, cfg)?;
    let cache = match &args.cache {
        Some(path) => SummaryCache::open(path),
        None => SummaryCache::in_memory(),
    };
    let mode = if args.zero_shot { Mode::ZeroShot } else { Mode::ItemRag };
    let pipeline = ItemRagPipeline::new(&train, &index, store.as_ref(), cfg.retrieval(), &cache, llm.as_ref())?
        .with_mode(mode)
        .with_history_limit(cfg.history_limit);

    let report: EvalReport = evaluate_candidates(&candidates, |c| pipeline.rank(c));
    if !report.failures.is_empty() {
        tracing::warn!(failed = report.failures.len(), "some users could not be ranked");
    }
    if let Some(path) = &args.rankings {
        write_jsonl(path, &report.rankings)?;
    }
    let presented = report.presentation(report_config(cfg, llm.as_ref(), mode, cold), cfg.seed);
    let text = serde_json::to_string_pretty(&presented)? + "\n";
    match &args.report {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
