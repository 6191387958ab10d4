mod config;
mod io;
mod serve;

use std::collections::BTreeSet;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use pricer_core::alignment::{combined_reward, score_groups, GroupConfig, GroupRecord, RewardConfig};
use pricer_core::catalog::{build_pool, write_listings, write_pool_manifest, Catalog, FilterRules, Listing, PoolStatus};
use pricer_core::confidence::{threshold_grid, write_pr_csv, write_pr_summary, PrItem};
use pricer_core::datagen::{build_dataset, split_queries, DatagenConfig, DatagenContext};
use pricer_core::exec::ExecMode;
use pricer_core::metrics::{segment_report_with, MetricParams, PricePair};
use pricer_core::pricer::{batch_eval, compare_targets, k_sweep, theta_sweep, Pricer, PredictionRecord};
use pricer_core::prompting::RefLabel;
use pricer_core::synth::{self, SynthConfig};
use pricer_core::vecindex::{self, build_index, Embedder, GraphParams, IndexSnapshot, RetrievalKind, SnapshotStore};
use serde::Serialize;

use crate::config::Config;

#[derive(Parser)]
#[command(name = "pricer", version, about = "Retrieval-augmented price suggestions for second-hand listings")]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic marketplace.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        queries: usize,
    },
    /// Validate a raw listing stream.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write rejected lines (JSON lines).
        #[arg(long)]
        rejects: Option<PathBuf>,
    },
    /// Build the filtered candidate pool.
    Pool {
        #[arg(long)]
        listings: PathBuf,
        /// JSON filter rules; defaults apply when omitted.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Reference time for the recency window (RFC 3339).
        #[arg(long)]
        as_of: DateTime<Utc>,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    /// Build or query an embedding index snapshot.
    Index(IndexCommand),
    /// Price a single listing.
    Price {
        #[command(flatten)]
        pipe: PipelineArgs,
        /// JSON file holding one listing.
        #[arg(long)]
        listing: PathBuf,
    },
    #[command(subcommand)]
    /// Batch evaluation and threshold sweeps.
    Eval(EvalCommand),
    /// Build bidirectional-reasoning training records.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        index: PathBuf,
        /// Listings (JSON lines) whose own price is the label.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 0.9)]
        jaro_threshold: f64,
        /// Share of queries used for supervised data; the rest is written to
        /// `--holdout` when given.
        #[arg(long, default_value_t = 1.0)]
        split: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        audit: Option<PathBuf>,
        #[arg(long)]
        holdout: Option<PathBuf>,
    },
    #[command(subcommand)]
    /// Alignment reward and group-relative update statistics.
    Reward(RewardCommand),
    /// Serve price suggestions over HTTP.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        index: PathBuf,
        /// Pool manifest to rebuild the index from on each refresh.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        theta: Option<f64>,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed a pool and write an index snapshot.
    Build {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also build the navigable graph for approximate search.
        #[arg(long)]
        ann: bool,
        /// Snapshot timestamp; defaults to the pool's as-of time.
        #[arg(long)]
        built_at: Option<DateTime<Utc>>,
    },
    /// Top-k search for free text.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Use the graph with this beam width instead of exact search.
        #[arg(long)]
        ef: Option<usize>,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    index: PathBuf,
    /// Overrides `pipeline.theta_h`.
    #[arg(long)]
    theta: Option<f64>,
    /// Overrides `pipeline.k`.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct MetricArgs {
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    #[arg(long, default_value_t = 1.4)]
    dar_a: f64,
    #[arg(long, default_value_t = 10.0)]
    dar_b: f64,
}

impl MetricArgs {
    fn params(&self) -> Result<MetricParams> {
        let p = MetricParams {
            tau: self.tau,
            dar_a: self.dar_a,
            dar_b: self.dar_b,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Metrics for (predicted, truth) pairs.
    Metrics {
        /// JSON lines with `predicted`, `truth` and optional `segment`.
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Price every query and report metrics over the priced ones.
    Run {
        #[command(flatten)]
        pipe: PipelineArgs,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Precision and coverage over entropy thresholds.
    PrSweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "predictions")]
        index: Option<PathBuf>,
        #[arg(long, required_unless_present = "predictions")]
        queries: Option<PathBuf>,
        /// Reuse a predictions file instead of running the pipeline.
        #[arg(long, conflicts_with_all = ["index", "queries"])]
        predictions: Option<PathBuf>,
        /// Comma-separated thresholds; defaults to 0..=max in steps.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 2.5)]
        max: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long, default_value_t = 0.2)]
        tau: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Metrics as a function of the number of references.
    KSweep {
        #[command(flatten)]
        pipe: PipelineArgs,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,5,10,20,50")]
        ks: Vec<usize>,
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two targets on identical retrievals.
    Compare {
        #[command(flatten)]
        pipe: PipelineArgs,
        /// Config whose `[gateway]` section defines the second target.
        #[arg(long)]
        other: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RewardCommand {
    /// Reward for one output.
    Score {
        #[arg(long)]
        pred: f64,
        #[arg(long)]
        truth: f64,
        /// Cited labels, e.g. `B1,B3`.
        #[arg(long, value_delimiter = ',')]
        cited: Vec<RefLabel>,
        #[arg(long, value_delimiter = ',')]
        golden: Vec<RefLabel>,
        #[arg(long, default_value_t = 25.0)]
        alpha: f64,
    },
    /// Rewards, advantages and surrogate objective for sampled groups.
    Batch {
        /// JSON lines of groups.
        #[arg(long)]
        groups: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        alpha: f64,
        #[arg(long, default_value_t = 8)]
        group_size: usize,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mode = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    match cli.command {
        Command::Synth { out_dir, seed, queries } => cmd_synth(&out_dir, seed, queries),
        Command::Ingest { input, out, rejects } => cmd_ingest(&input, &out, rejects.as_deref()),
        Command::Pool {
            listings,
            rules,
            as_of,
            out,
        } => cmd_pool(&listings, rules.as_deref(), as_of, &out),
        Command::Index(c) => cmd_index(c, mode),
        Command::Price { pipe, listing } => {
            let pricer = pipe.pricer()?;
            let listing: Listing = io::read_json(&listing)?;
            io::write_json(None, &pricer.suggest_price(&listing))
        }
        Command::Eval(c) => cmd_eval(c, mode),
        Command::Datagen {
            config,
            index,
            queries,
            k,
            jaro_threshold,
            split,
            out,
            audit,
            holdout,
        } => {
            let cfg = Config::load(config.as_deref())?;
            let snapshot = io::read_index(&index)?;
            let embedder = checked_embedder(&cfg, &snapshot)?;
            let gateway = cfg.gateway.build()?;
            let templates = cfg.templates()?;
            let dg = DatagenConfig {
                k,
                jaro_threshold,
                ..DatagenConfig::default()
            };
            let queries = io::read_listings(&queries)?;
            let (train, rest) = split_queries(&queries, split);
            let ctx = DatagenContext {
                index: &snapshot,
                embedder: embedder.as_ref(),
                gateway: gateway.as_ref(),
                templates: &templates,
                config: &dg,
            };
            let build = build_dataset(train, &ctx, mode);
            let mut w = io::writer(Some(&out))?;
            build.write_records(&mut w, &templates)?;
            w.flush()?;
            if let Some(path) = audit {
                let mut w = io::writer(Some(&path))?;
                build.write_audit(&mut w)?;
                w.flush()?;
            }
            if let Some(path) = holdout {
                let mut w = io::writer(Some(&path))?;
                write_listings(&mut w, rest)?;
                w.flush()?;
            }
            io::write_json(None, &build.summary())
        }
        Command::Reward(c) => cmd_reward(c, mode),
        Command::Serve {
            config,
            index,
            pool,
            addr,
            theta,
        } => {
            let cfg = Config::load(config.as_deref())?;
            let snapshot = io::read_index(&index)?;
            serve::run(cfg, snapshot, pool, addr, theta)
        }
    }
}

impl PipelineArgs {
    fn pricer(&self) -> Result<Pricer> {
        let cfg = Config::load(self.config.as_deref())?;
        let snapshot = io::read_index(&self.index)?;
        pricer_from(&cfg, snapshot, self.theta, self.k)
    }
}

/// The configured embedder, checked against the one that built `snapshot`.
pub(crate) fn checked_embedder(cfg: &Config, snapshot: &IndexSnapshot) -> Result<Arc<dyn Embedder>> {
    let embedder = cfg.embedder.build()?;
    ensure!(
        embedder.dimension() == snapshot.dimension(),
        "embedder dimension {} does not match index dimension {}",
        embedder.dimension(),
        snapshot.dimension()
    );
    if let Some(p) = snapshot.provider() {
        ensure!(
            p == embedder.kind(),
            "index was built with a {:?} embedder but the config uses {:?}",
            p,
            embedder.kind()
        );
    }
    Ok(embedder)
}

pub(crate) fn pricer_from(cfg: &Config, snapshot: IndexSnapshot, theta: Option<f64>, k: Option<usize>) -> Result<Pricer> {
    let pipeline = cfg.pipeline(theta, k)?;
    if let RetrievalKind::Ann { .. } = pipeline.retrieval {
        ensure!(snapshot.graph().is_some(), "approximate retrieval needs an index built with --ann");
    }
    let embedder = checked_embedder(cfg, &snapshot)?;
    Ok(Pricer::new(
        Arc::new(SnapshotStore::new(snapshot)),
        embedder,
        cfg.gateway.build()?,
        cfg.templates()?,
        pipeline,
    ))
}

#[derive(Serialize)]
struct SynthManifest {
    seed: u64,
    as_of: DateTime<Utc>,
    listings: usize,
    queries: usize,
}

fn cmd_synth(out_dir: &Path, seed: u64, queries: usize) -> Result<()> {
    let cfg = SynthConfig {
        seed,
        n_queries: queries,
        ..SynthConfig::default()
    };
    let m = synth::generate(&cfg);
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (name, listings) in [("listings.jsonl", &m.listings), ("queries.jsonl", &m.queries)] {
        let mut w = io::writer(Some(&out_dir.join(name)))?;
        write_listings(&mut w, listings)?;
        w.flush()?;
    }
    io::write_json(Some(&out_dir.join("rules.json")), &m.rules)?;
    let manifest = SynthManifest {
        seed,
        as_of: m.as_of,
        listings: m.listings.len(),
        queries: m.queries.len(),
    };
    io::write_json(Some(&out_dir.join("synth.json")), &manifest)?;
    io::write_json(None, &manifest)
}

fn cmd_ingest(input: &Path, out: &Path, rejects: Option<&Path>) -> Result<()> {
    let report = pricer_core::catalog::ingest_listings(io::reader(input)?)?;
    let mut w = io::writer(Some(out))?;
    write_listings(&mut w, report.catalog.listings())?;
    w.flush()?;
    if let Some(path) = rejects {
        let mut w = io::writer(Some(path))?;
        for r in &report.rejects {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    io::write_json(
        None,
        &serde_json::json!({ "accepted": report.catalog.len(), "rejected": report.rejects.len() }),
    )
}

fn cmd_pool(listings: &Path, rules: Option<&Path>, as_of: DateTime<Utc>, out: &Path) -> Result<()> {
    let rules: FilterRules = match rules {
        Some(p) => io::read_json(p)?,
        None => FilterRules::default(),
    };
    let catalog = Catalog::new(io::read_listings(listings)?)?;
    let pool = build_pool(&catalog, &rules, as_of)?;
    if pool.status == PoolStatus::EmptyWarning {
        tracing::warn!("every listing was filtered out; the pool is empty");
    }
    let mut w = io::writer(Some(out))?;
    write_pool_manifest(&mut w, &pool)?;
    w.flush()?;
    io::write_json(
        None,
        &serde_json::json!({
            "catalog": catalog.len(),
            "pool": pool.len(),
            "click_cutoff": pool.click_cutoff,
            "status": pool.status,
        }),
    )
}

fn cmd_index(c: IndexCommand, mode: ExecMode) -> Result<()> {
    match c {
        IndexCommand::Build {
            config,
            pool,
            out,
            ann,
            built_at,
        } => {
            let cfg = Config::load(config.as_deref())?;
            let pool = io::read_pool(&pool)?;
            if pool.is_empty() {
                bail!("pool is empty; nothing to index");
            }
            let embedder = cfg.embedder.build()?;
            let graph = ann.then(GraphParams::default);
            let snapshot = build_index(&pool, embedder.as_ref(), graph, built_at.unwrap_or(pool.as_of))?;
            io::write_index(&out, &snapshot)?;
            io::write_json(
                None,
                &serde_json::json!({ "entries": snapshot.len(), "dimension": snapshot.dimension(), "graph": ann }),
            )
        }
        IndexCommand::Search {
            config,
            index,
            text,
            k,
            ef,
        } => {
            let cfg = Config::load(config.as_deref())?;
            let snapshot = io::read_index(&index)?;
            let embedder = checked_embedder(&cfg, &snapshot)?;
            let query = embedder.embed_text(&text)?;
            let kind = match ef {
                Some(ef) => RetrievalKind::Ann { ef },
                None => RetrievalKind::Exact,
            };
            let set = vecindex::retrieve(&snapshot, "", &query, k, kind, mode)?;
            io::write_json(None, &set)
        }
    }
}

fn cmd_eval(c: EvalCommand, mode: ExecMode) -> Result<()> {
    match c {
        EvalCommand::Metrics { pairs, metric, out } => {
            let pairs: Vec<PricePair> = io::read_jsonl(&pairs)?;
            let report = segment_report_with(&pairs, &metric.params()?, mode)?;
            io::write_json(out.as_deref(), &report)
        }
        EvalCommand::Run {
            pipe,
            queries,
            metric,
            predictions,
            report,
        } => {
            let params = metric.params()?;
            let pricer = pipe.pricer()?;
            let queries = io::read_listings(&queries)?;
            let run = batch_eval(&pricer, &queries, mode);
            if let Some(path) = predictions {
                let mut w = io::writer(Some(&path))?;
                run.write_predictions(&mut w)?;
                w.flush()?;
            }
            let summary = serde_json::json!({
                "model_id": run.model_id,
                "config": run.config,
                "counts": run.counts(),
                "coverage": run.counts().coverage(),
                "metrics": run.metrics(&params).ok(),
            });
            io::write_json(report.as_deref(), &summary)
        }
        EvalCommand::PrSweep {
            config,
            index,
            queries,
            predictions,
            thresholds,
            max,
            step,
            tau,
            csv,
            summary,
        } => {
            let thresholds = if thresholds.is_empty() {
                threshold_grid(max, step)
            } else {
                thresholds
            };
            let curve = match predictions {
                Some(path) => {
                    let records: Vec<PredictionRecord> = io::read_jsonl(&path)?;
                    let items: Vec<PrItem> = records
                        .iter()
                        .filter_map(|r| match (r.raw_price, r.avg_entropy) {
                            (Some(p), Some(h)) => Some(PrItem {
                                avg_entropy: h,
                                correct: pricer_core::metrics::within_tolerance(p, r.truth, tau),
                            }),
                            _ => None,
                        })
                        .collect();
                    pricer_core::confidence::pr_sweep(&items, &thresholds)?
                }
                None => {
                    let cfg = Config::load(config.as_deref())?;
                    let index = index.context("--index is required without --predictions")?;
                    let queries = queries.context("--queries is required without --predictions")?;
                    let pricer = pricer_from(&cfg, io::read_index(&index)?, Some(f64::INFINITY), None)?;
                    let queries = io::read_listings(&queries)?;
                    theta_sweep(&pricer, &queries, &thresholds, tau, mode)?.1
                }
            };
            if let Some(path) = csv {
                let mut w = io::writer(Some(&path))?;
                write_pr_csv(&mut w, &curve)?;
                w.flush()?;
            }
            let mut w = io::writer(summary.as_deref())?;
            write_pr_summary(&mut w, &curve)?;
            w.write_all(b"\n")?;
            w.flush()?;
            Ok(())
        }
        EvalCommand::KSweep {
            pipe,
            queries,
            ks,
            metric,
            out,
        } => {
            let pricer = pipe.pricer()?;
            let queries = io::read_listings(&queries)?;
            let rows = k_sweep(&pricer, &queries, &ks, &metric.params()?, mode);
            io::write_json(out.as_deref(), &rows)
        }
        EvalCommand::Compare {
            pipe,
            other,
            queries,
            metric,
            out,
        } => {
            let pricer = pipe.pricer()?;
            let other = Config::load(Some(&other))?.gateway.build()?;
            let queries = io::read_listings(&queries)?;
            let (cmp, _, _) = compare_targets(&pricer, other, &queries, &metric.params()?, mode);
            io::write_json(out.as_deref(), &cmp)
        }
    }
}

fn cmd_reward(c: RewardCommand, mode: ExecMode) -> Result<()> {
    match c {
        RewardCommand::Score {
            pred,
            truth,
            cited,
            golden,
            alpha,
        } => {
            let cited: BTreeSet<RefLabel> = cited.into_iter().collect();
            let golden: BTreeSet<RefLabel> = golden.into_iter().collect();
            let report = combined_reward(pred, truth, &cited, &golden, &RewardConfig { alpha })?;
            io::write_json(None, &report)
        }
        RewardCommand::Batch {
            groups,
            alpha,
            group_size,
            epsilon,
            beta,
            out,
        } => {
            let groups: Vec<GroupRecord> = io::read_jsonl(&groups)?;
            let cfg = GroupConfig {
                group_size,
                epsilon,
                beta,
            };
            cfg.validate()?;
            let reports = score_groups(&groups, &RewardConfig { alpha }, &cfg, mode);
            let mut w = io::writer(out.as_deref())?;
            let mut failed = 0usize;
            for (g, r) in groups.iter().zip(reports) {
                let line = match r {
                    Ok(report) => serde_json::to_string(&report)?,
                    Err(e) => {
                        failed += 1;
                        serde_json::to_string(&serde_json::json!({ "group_id": g.group_id, "error": e.to_string() }))?
                    }
                };
                writeln!(w, "{line}")?;
            }
            w.flush()?;
            if failed > 0 {
                tracing::warn!(failed, "some groups could not be scored");
            }
            Ok(())
        }
    }
}
