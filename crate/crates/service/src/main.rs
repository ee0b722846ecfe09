use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use alleviate_core::engine::{Engine, EngineConfig, EventSink, NullSink};
use alleviate_core::ingest::ProviderNote;
use alleviate_core::kg::{EntityId, KnowledgeGraph};
use alleviate_core::resources::Resources;
use alleviate_core::safety::{check_action, parse_constraints, ActionType, Bindings};
use alleviate_core::screeners::{advance, load_tree, match_concepts, Thresholds, TreeState};
use alleviate_service::app::{summarize, App};
use alleviate_service::config::{config_path, ServiceConfig};
use alleviate_service::eventlog::read_log;
use chrono::Utc;
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "alleviate", version, about = "Knowledge-graph grounded support chatbot backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Extract triples from a provider note and print the patient graph as TSV.
    IngestNote {
        patient: String,
        file: PathBuf,
        /// Persist into the data directory of this config instead of a dry run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        note_id: Option<String>,
    },
    /// Evaluate the safety rules for one action and print the verdict.
    CheckConstraints {
        rules: PathBuf,
        graph: PathBuf,
        action: String,
        /// JSON object or a path to one, e.g. {"$patient": "patient:p1"}
        bindings: String,
    },
    /// Rebuild state from an event log directory and print a summary.
    Replay {
        log_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a questionnaire tree over a labeled JSONL corpus.
    EvalScreener {
        tree: PathBuf,
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.70)]
        threshold: f64,
        #[arg(long, default_value_t = 1)]
        flag_at: u32,
        #[arg(long, default_value_t = 4)]
        emergency_at: u32,
    },
}

type CliResult = Result<(), String>;

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_config(flag: Option<PathBuf>) -> Result<Option<ServiceConfig>, String> {
    config_path(flag).map(|p| ServiceConfig::load(&p).map_err(|e| e.to_string())).transpose()
}

fn print_json(v: &impl serde::Serialize) -> CliResult {
    let s = serde_json::to_string_pretty(v).map_err(|e| e.to_string())?;
    emit(&format!("{s}\n"))
}

fn emit(text: &str) -> CliResult {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.to_string()),
        _ => Ok(()),
    }
}

fn serve(config: Option<PathBuf>) -> CliResult {
    let cfg = load_config(config)?.ok_or("no config: pass --config or set ALLEVIATE_CONFIG")?;
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let app = Arc::new(App::start(cfg).map_err(|e| e.to_string())?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(app.config.listen).await.map_err(|e| format!("{}: {e}", app.config.listen))?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        println!("listening on http://{addr}");
        std::io::stdout().flush().ok();
        alleviate_service::api::serve(app, listener, shutdown_signal()).await.map_err(|e| e.to_string())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        tokio::signal::ctrl_c().await.ok();
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn ingest_note(patient: &str, file: &Path, config: Option<PathBuf>, note_id: Option<String>) -> CliResult {
    let text = read(file)?;
    let patient = if patient.contains(':') { patient.parse::<EntityId>() } else { EntityId::patient(patient) }
        .map_err(|e| e.to_string())?;
    let note_id = note_id.unwrap_or_else(|| file.file_stem().map_or("note".into(), |s| s.to_string_lossy().into_owned()));
    let note = ProviderNote { note_id, patient_id: patient.clone(), text, authored_at: Utc::now() };
    let (graph, warnings) = match config {
        Some(path) => {
            let cfg = ServiceConfig::load(&path).map_err(|e| e.to_string())?;
            let app = App::start(cfg).map_err(|e| e.to_string())?;
            let report = app.engine.ingest_note(&note, &app.log).map_err(|e| e.to_string())?;
            app.snapshot_graph(&patient).map_err(|e| e.to_string())?;
            (app.engine.patient_graph(&patient).expect("just ingested"), report.warnings)
        }
        None => {
            let engine = Engine::new(Arc::new(Resources::bundled()), EngineConfig::default()).map_err(|e| e.to_string())?;
            let report = engine.ingest_note(&note, &NullSink as &dyn EventSink).map_err(|e| e.to_string())?;
            (engine.patient_graph(&patient).expect("just ingested"), report.warnings)
        }
    };
    for w in warnings {
        eprintln!("warning: {w}");
    }
    emit(&graph.to_tsv())
}

fn check_constraints(rules: &Path, graph: &Path, action: &str, bindings: &str) -> CliResult {
    let rules = parse_constraints(&read(rules)?).map_err(|e| format!("{}: {e}", rules.display()))?;
    let g = KnowledgeGraph::from_tsv(graph.display().to_string(), &read(graph)?).map_err(|e| format!("{}: {e}", graph.display()))?;
    let action: ActionType = action.parse().map_err(|e: String| e)?;
    let raw = if bindings.trim_start().starts_with('{') { bindings.to_string() } else { read(Path::new(bindings))? };
    let bindings: Bindings = serde_json::from_str(&raw).map_err(|e| format!("bindings: {e}"))?;
    let verdict = check_action(action, &bindings, &g, &rules).map_err(|e| e.to_string())?;
    print_json(&verdict)
}

fn replay(log_dir: &Path, config: Option<PathBuf>) -> CliResult {
    let (resources, engine_cfg) = match load_config(config)? {
        Some(cfg) => (cfg.load_resources().map_err(|e| e.to_string())?, cfg.engine_config()),
        None => (Resources::bundled(), EngineConfig::default()),
    };
    if !log_dir.is_dir() {
        return Err(format!("{}: not a directory", log_dir.display()));
    }
    let contents = read_log(log_dir).map_err(|e| e.to_string())?;
    let events = contents.events().map_err(|e| e.to_string())?;
    let engine = Engine::replay(Arc::new(resources), engine_cfg, &events).map_err(|e| e.to_string())?;
    print_json(&summarize(&engine, &contents))
}

fn eval_screener(tree: &Path, corpus: &Path, threshold: f64, thresholds: Thresholds) -> CliResult {
    let t = load_tree(&read(tree)?).map_err(|e| format!("{}: {e}", tree.display()))?;
    let mut state = TreeState::new(&t.tree_id, "eval");
    let mut trace = Vec::new();
    let levels: Vec<u32> = std::iter::once(0).chain(alleviate_core::screeners::severity_levels(&t)).collect();
    let mut confusion = vec![vec![0usize; levels.len()]; levels.len()];
    let mut correct = 0;
    let mut total = 0;
    for (i, line) in read(corpus)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("{}:{}: {e}", corpus.display(), i + 1))?;
        let utterance = v["utterance"].as_str().ok_or_else(|| format!("{}:{}: missing utterance", corpus.display(), i + 1))?;
        let label = v["label"].as_u64().map(|l| l as u32);
        let matches = match_concepts(utterance, &t, threshold).map_err(|e| e.to_string())?;
        let detected = matches.iter().filter_map(|m| t.node(&m.node_id)).map(|n| n.severity).max().unwrap_or(0);
        let (next, alert) = advance(&state, &t, &matches, &format!("u{:04}", i + 1), thresholds, Utc::now()).map_err(|e| e.to_string())?;
        state = next;
        if let Some(label) = label {
            total += 1;
            correct += usize::from(label == detected);
            if let (Some(r), Some(c)) = (levels.iter().position(|&l| l == label), levels.iter().position(|&l| l == detected)) {
                confusion[r][c] += 1;
            }
        }
        trace.push(json!({
            "index": trace.len(),
            "utterance": utterance,
            "label": label,
            "detected": detected,
            "confirmed_level": state.confirmed_level,
            "escalation": state.escalation,
            "alert": alert.map(|a| json!({ "level": a.level, "node": a.triggering_node })),
        }));
    }
    print_json(&json!({
        "tree_id": t.tree_id,
        "threshold": threshold,
        "trace": trace,
        "confusion": { "levels": levels, "rows_label_cols_detected": confusion },
        "accuracy": if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config } => serve(config),
        Command::IngestNote { patient, file, config, note_id } => ingest_note(&patient, &file, config, note_id),
        Command::CheckConstraints { rules, graph, action, bindings } => check_constraints(&rules, &graph, &action, &bindings),
        Command::Replay { log_dir, config } => replay(&log_dir, config),
        Command::EvalScreener { tree, corpus, threshold, flag_at, emergency_at } => {
            eval_screener(&tree, &corpus, threshold, Thresholds { flag_at, emergency_at })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.lines().next().unwrap_or_default());
            ExitCode::FAILURE
        }
    }
}
