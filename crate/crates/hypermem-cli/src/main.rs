//! Operator surface: build indexes, run query sessions, judge result
//! batches, and inspect persisted memory snapshots.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hypermem_core::config::{ChatProviderConfig, ProjectConfig, ProviderKind};
use hypermem_core::error::EngineError;
use hypermem_core::eval::{evaluate_records, EvalRecord, EvalSummary};
use hypermem_core::gateway::Gateway;
use hypermem_core::index::{build_index, load_index, BuildOutcome};
use hypermem_core::memory::{self, MemoryHypergraph};
use hypermem_core::orchestrator::{build_entity_index, run_session, run_stepwise, SessionEnv, Strategy};
use hypermem_core::store;
use hypermem_core::trace::SessionTrace;

#[derive(Parser)]
#[command(name = "hypermem", version, about = "Multi-step document QA with a hypergraph working memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the chunk and graph index from a corpus of .txt files.
    Index {
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory; defaults to the configured path.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Rebuild even when the content hash matches.
        #[arg(long)]
        force: bool,
    },
    /// Run one query session; prints the answer, writes a trace.
    Query {
        #[arg(long)]
        config: PathBuf,
        query: String,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        max_steps: Option<u32>,
        /// Disable the merging operation (ablation).
        #[arg(long)]
        no_merge: bool,
        /// Disable the update operation (ablation).
        #[arg(long)]
        no_update: bool,
        /// Force an answer at every step.
        #[arg(long)]
        stepwise: bool,
        /// Keep merged parents live instead of retiring them.
        #[arg(long)]
        keep_merge_parents: bool,
        /// Chat provider override, e.g. scripted:fixtures/session.jsonl
        #[arg(long)]
        provider: Option<String>,
    },
    /// Judge a results manifest and write a metrics report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        manifest: PathBuf,
        /// Report path; defaults to <manifest>.report.jsonl
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render a persisted memory snapshot from a session trace.
    Inspect {
        trace_dir: PathBuf,
        /// Step to render; use --final for the last one.
        #[arg(long, conflicts_with = "last")]
        step: Option<u32>,
        #[arg(long = "final")]
        last: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StrategyArg {
    Adaptive,
    GlobalOnly,
    LocalOnly,
}

impl From<StrategyArg> for Strategy {
    fn from(value: StrategyArg) -> Self {
        match value {
            StrategyArg::Adaptive => Strategy::Adaptive,
            StrategyArg::GlobalOnly => Strategy::GlobalOnly,
            StrategyArg::LocalOnly => Strategy::LocalOnly,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for user errors, 2 for environment/provider failures.
fn exit_code(e: &EngineError) -> u8 {
    match e {
        EngineError::ProviderTransport { .. }
        | EngineError::RetrievalUnavailable { .. }
        | EngineError::Io(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), EngineError> {
    match cli.command {
        Command::Index { config, corpus, force } => cmd_index(&config, corpus.as_deref(), force),
        Command::Query {
            config,
            query,
            strategy,
            max_steps,
            no_merge,
            no_update,
            stepwise,
            keep_merge_parents,
            provider,
        } => cmd_query(
            &config,
            &query,
            QueryOverrides {
                strategy: strategy.map(Into::into),
                max_steps,
                no_merge,
                no_update,
                stepwise,
                keep_merge_parents,
                provider,
            },
        ),
        Command::Eval { config, manifest, report } => cmd_eval(&config, &manifest, report.as_deref()),
        Command::Inspect { trace_dir, step, last } => cmd_inspect(&trace_dir, step, last),
    }
}

fn cmd_index(config_path: &Path, corpus: Option<&Path>, force: bool) -> Result<(), EngineError> {
    let config = ProjectConfig::load(config_path)?;
    let corpus_dir = corpus.unwrap_or(&config.paths.corpus);
    let chat = config.build_chat_provider()?;
    let embedder = config.build_embedder()?;
    let prompts = config.load_prompts()?;
    let outcome = build_index(
        &config,
        corpus_dir,
        &config.paths.index,
        chat.as_ref(),
        embedder.as_ref(),
        &prompts,
        force,
    )?;
    match outcome {
        BuildOutcome::UpToDate => println!("index up-to-date"),
        BuildOutcome::Built { docs, chunks, nodes, edges } => {
            println!("indexed {docs} docs, {chunks} chunks, {nodes} entities, {edges} relations")
        }
    }
    Ok(())
}

struct QueryOverrides {
    strategy: Option<Strategy>,
    max_steps: Option<u32>,
    no_merge: bool,
    no_update: bool,
    stepwise: bool,
    keep_merge_parents: bool,
    provider: Option<String>,
}

fn parse_provider_override(spec: &str) -> Result<ChatProviderConfig, EngineError> {
    match spec.split_once(':') {
        Some(("scripted", path)) if !path.is_empty() => Ok(ChatProviderConfig {
            kind: ProviderKind::Scripted,
            fixture: Some(PathBuf::from(path)),
            ..Default::default()
        }),
        _ => Err(EngineError::Config(format!(
            "unsupported --provider value {spec:?}; expected scripted:PATH"
        ))),
    }
}

fn cmd_query(config_path: &Path, query: &str, overrides: QueryOverrides) -> Result<(), EngineError> {
    let mut config = ProjectConfig::load(config_path)?;
    if let Some(strategy) = overrides.strategy {
        config.session.strategy = strategy;
    }
    if let Some(max_steps) = overrides.max_steps {
        config.session.max_steps = max_steps;
    }
    if overrides.no_merge {
        config.session.enable_merge = false;
    }
    if overrides.no_update {
        config.session.enable_update = false;
    }
    if overrides.stepwise {
        config.session.forced_answer_every_step = true;
    }
    if overrides.keep_merge_parents {
        config.session.keep_merge_parents = true;
    }
    if let Some(spec) = &overrides.provider {
        let mut chat = parse_provider_override(spec)?;
        // Resolve relative fixture paths against the working directory.
        chat.temperature = config.provider.chat.temperature;
        chat.max_output_tokens = config.provider.chat.max_output_tokens;
        config.provider.chat = chat;
    }
    config.session.validate()?;

    let loaded = load_index(&config.paths.index)?;
    let mut graph = loaded.graph;
    let mut entity_index = build_entity_index(&graph, loaded.manifest.embedding_dim)?;
    let chat = config.build_chat_provider()?;
    let embedder = config.build_embedder()?;
    let prompts = config.load_prompts()?;

    let mut gateway = Gateway::new(chat.as_ref(), &prompts);
    gateway.temperature = config.provider.chat.temperature;
    gateway.max_output_tokens = config.provider.chat.max_output_tokens;

    let mut env = SessionEnv {
        graph: &mut graph,
        chunk_store: &loaded.chunks,
        entity_index: &mut entity_index,
        gateway,
        embedder: embedder.as_ref(),
    };

    let (answer, trace) = if config.session.forced_answer_every_step {
        let (answers, trace) = run_stepwise(&mut env, query, &config.session)?;
        (answers.last().cloned().unwrap_or_default(), trace)
    } else {
        run_session(&mut env, query, &config.session)?
    };

    let trace_dir = config.paths.traces.join(trace.dir_name());
    trace.save(&trace_dir)?;
    // Freeze the project configuration alongside the trace, verbatim so
    // the copy is stable across working directories.
    std::fs::copy(config_path, trace_dir.join("project.toml"))?;

    println!("{answer}");
    eprintln!("{}", trace_dir.display());
    Ok(())
}

fn cmd_eval(
    config_path: &Path,
    manifest_path: &Path,
    report: Option<&Path>,
) -> Result<(), EngineError> {
    let config = ProjectConfig::load(config_path)?;
    let mut records: Vec<EvalRecord> = store::read_jsonl(manifest_path)?;
    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));

    // Resolve trace pointers and pull missing predictions from traces.
    let mut traces: Vec<Option<SessionTrace>> = Vec::with_capacity(records.len());
    for record in &mut records {
        let trace = match &record.trace_dir {
            Some(dir) => {
                let path = resolve_dir(manifest_dir, dir);
                match SessionTrace::load(&path) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        log::warn!("record {}: unreadable trace {}: {e}", record.query_id, path.display());
                        None
                    }
                }
            }
            None => None,
        };
        if record.predicted.is_none() {
            if let Some(t) = &trace {
                record.predicted = Some(t.final_answer.clone());
            }
        }
        traces.push(trace);
    }

    let judge = config.build_judge_provider()?;
    let prompts = config.load_prompts()?;
    let avg_by_id: std::collections::HashMap<String, f64> = records
        .iter()
        .zip(&traces)
        .filter_map(|(r, t)| {
            let t = t.as_ref()?;
            let snapshot = t.snapshots.last()?;
            let m = memory::from_snapshot_records(snapshot).ok()?;
            Some((r.query_id.clone(), m.avg_entities_per_hyperedge()))
        })
        .collect();

    let (rows, summary) = evaluate_records(&records, judge.as_ref(), &prompts, |record| {
        avg_by_id.get(&record.query_id).copied()
    })?;

    let report_path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest_path.with_extension("report.jsonl"));
    store::write_jsonl(&report_path, &rows)?;
    let summary_line = serde_json::to_string(&summary)?;
    std::fs::write(
        report_path.with_extension("summary.json"),
        summary_line + "\n",
    )?;

    print_summary(&summary);
    eprintln!("{}", report_path.display());
    Ok(())
}

fn resolve_dir(base: &Path, dir: &str) -> PathBuf {
    let p = PathBuf::from(dir);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn print_summary(summary: &EvalSummary) {
    println!("records: {}", summary.records);
    match summary.accuracy {
        Some(acc) => println!(
            "accuracy: {:.4} ({}/{} judged correct)",
            acc, summary.correct, summary.judged
        ),
        None => println!("accuracy: n/a (no judged records)"),
    }
    match summary.mean_comprehensiveness {
        Some(m) => println!(
            "comprehensiveness: {:.2} (unscored: {})",
            m, summary.unscored_comprehensiveness
        ),
        None => println!("comprehensiveness: n/a"),
    }
    match summary.mean_diversity {
        Some(m) => println!("diversity: {:.2} (unscored: {})", m, summary.unscored_diversity),
        None => println!("diversity: n/a"),
    }
    if summary.failed_records > 0 {
        println!("failed records: {}", summary.failed_records);
    }
    for row in &summary.stats {
        let acc = row
            .accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "group {}: sessions={} avg-entities-per-hyperedge={:.3} accuracy={}",
            row.group, row.sessions, row.mean_avg_entities_per_hyperedge, acc
        );
    }
}

fn cmd_inspect(trace_dir: &Path, step: Option<u32>, last: bool) -> Result<(), EngineError> {
    let trace = SessionTrace::load(trace_dir)?;
    if trace.snapshots.is_empty() {
        return Err(EngineError::Trace("trace holds no memory snapshots".into()));
    }
    let available: Vec<u32> = trace.steps.iter().map(|s| s.step).collect();
    let index = match (step, last) {
        (Some(t), _) => match trace.steps.iter().position(|s| s.step == t) {
            Some(i) => i,
            None => {
                return Err(EngineError::Trace(format!(
                    "no snapshot for step {t}; available steps: {available:?}"
                )))
            }
        },
        (None, true) => trace.snapshots.len() - 1,
        (None, false) => {
            return Err(EngineError::Trace(format!(
                "pass --step N or --final; available steps: {available:?}"
            )))
        }
    };
    let m = memory::from_snapshot_records(&trace.snapshots[index])?;
    println!("query: {}", trace.target_query);
    println!("step: {} of {:?}", available[index], available);
    print!("{}", render_snapshot(&m));
    Ok(())
}

/// Detailed listing: live points with membership and lineage chains,
/// retired points, and the vertex roster.
fn render_snapshot(m: &MemoryHypergraph) -> String {
    let mut out = String::new();
    let mut points: Vec<_> = m.points().collect();
    points.sort_by(|a, b| a.created_step.cmp(&b.created_step).then(a.id.cmp(&b.id)));
    out.push_str(&format!("live points: {}\n", points.len()));
    for p in points {
        let members: Vec<String> = p.vertex_ids.iter().cloned().collect();
        out.push_str(&format!(
            "[{}] step {} (updated {}): {}\n",
            p.id, p.created_step, p.updated_step, p.description
        ));
        out.push_str(&format!("    members: {}\n", members.join(", ")));
        if let Some((a, b)) = &p.lineage {
            out.push_str(&format!("    lineage: {} <- ({a}, {b})\n", p.id));
            for parent in [a, b] {
                if let Some(pp) = m.retired_point(parent) {
                    out.push_str(&format!("      retired [{}]: {}\n", pp.id, pp.description));
                }
            }
        }
    }
    let retired: Vec<_> = m.retired_points().collect();
    out.push_str(&format!("retired points: {}\n", retired.len()));
    out.push_str(&format!("vertices: {}\n", m.vertex_count()));
    for v in m.vertices() {
        out.push_str(&format!("- {} ({})\n", v.entity_info.name, v.entity_id));
    }
    out
}
