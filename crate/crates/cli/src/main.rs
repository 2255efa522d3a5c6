use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dagdnn::dot::export_dot;
use dagdnn::engine::{completeness, subgraph_eval, Engine};
use dagdnn::graph::NetworkSpec;
use dagdnn::lifting::{allpair_inductive, allpair_product, allpair_upto, factorize_levels, reconstruct_graph, verify_inverse, Factorization};
use dagdnn::passes::{assign_levels, normalize_io, normalize_spec, run_pass, LevelGraph, Pass};
use dagdnn::prune::{rewind_prune, verify_ticket, RewindOptions, Ticket};
use dagdnn::train::{train, Dataset, InitMode, TrainConfig, TrainRun};
use dagdnn::NodeId;
use log::{debug, info};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "dagdnn", version, about = "DAG neural-network passes, lifting factorization and pruning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a normalization pass.
    Normalize {
        input: PathBuf,
        #[arg(long, default_value = "all")]
        pass: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print node levels.
    Levelize {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Build the lifting matrices of a graph.
    Factorize {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check that the inverse lifting matrices undo the forward ones.
    VerifyInverse {
        lifting: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Rebuild a graph from its lifting matrices.
    Reconstruct {
        lifting: PathBuf,
        #[arg(long)]
        fold_relays: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// All-pair function matrix.
    Allpair {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "product")]
        form: Form,
        /// Stop the product at this level.
        #[arg(long)]
        upto: Option<usize>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a graph, or the sub-graph between two nodes.
    Eval {
        graph: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Target and source node of a sub-graph.
        #[arg(long, num_args = 2, value_names = ["I", "J"])]
        pair: Option<Vec<usize>>,
    },
    /// Completeness of every node pair.
    CompleteSubgraphs {
        graph: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Full-batch gradient descent.
    Train {
        graph: PathBuf,
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 1e-4)]
        lambda: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        checkpoint_every: usize,
        #[arg(long, value_enum, default_value = "graph")]
        init: Init,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Detect zero nodes at a checkpoint and prune them.
    Prune {
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        at: usize,
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
        #[arg(long)]
        level: Option<usize>,
        #[arg(long)]
        scan_all_levels: bool,
        #[arg(long)]
        rescan: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare a pruned run against its parent.
    VerifyTicket { run0: PathBuf, run1: PathBuf },
    /// Graphviz rendering.
    ExportDot {
        graph: PathBuf,
        #[arg(long)]
        normalized: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    Product,
    Inductive,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Graph,
    Random,
}

enum Failure {
    /// Bad input: unreadable files, malformed JSON, invalid graphs.
    Invalid { kind: String, message: String },
    /// A verification ran and did not pass.
    Verify { message: String },
}

type Res<T> = Result<T, Failure>;

const WRAPPERS: [&str; 8] = ["Graph", "Normalize", "Lift", "Engine", "Train", "Algebra", "Function", "Invalid"];

/// Innermost variant name of a nested error's debug form.
fn kind_of(debug: &str) -> String {
    let mut s = debug;
    loop {
        let end = s.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(s.len());
        let name = &s[..end];
        if WRAPPERS.contains(&name) && s[end..].starts_with('(') {
            s = &s[end + 1..];
            continue;
        }
        return name.to_string();
    }
}

fn invalid<E: std::fmt::Debug + std::fmt::Display>(e: E) -> Failure {
    Failure::Invalid { kind: kind_of(&format!("{e:?}")), message: e.to_string() }
}

fn read_json(path: &Path) -> Res<Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Invalid { kind: "Io".into(), message: format!("{}: {e}", path.display()) })?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Invalid { kind: "Json".into(), message: format!("{}: {e}", path.display()) })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, v: Value) -> Res<T> {
    serde_json::from_value(v).map_err(|e| Failure::Invalid { kind: "Schema".into(), message: format!("{}: {e}", path.display()) })
}

/// A network description, or a ticket carrying one.
fn load_spec(path: &Path) -> Res<(NetworkSpec, Option<Ticket>)> {
    let v = read_json(path)?;
    if v.get("kind").and_then(Value::as_str) == Some("ticket") {
        let t: Ticket = parse(path, v)?;
        return Ok((t.graph.clone(), Some(t)));
    }
    Ok((parse(path, v)?, None))
}

fn load_normalized(path: &Path) -> Res<LevelGraph> {
    let (spec, _) = load_spec(path)?;
    normalize_spec(&spec).map_err(invalid)
}

fn to_text<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, text: &str) -> Res<()> {
    let io = |e: std::io::Error| Failure::Invalid { kind: "Io".into(), message: format!("{}: {e}", path.display()) };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(text.as_bytes()).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    debug!("wrote {}", path.display());
    Ok(())
}

fn emit(output: Option<&Path>, text: &str) -> Res<()> {
    match output {
        Some(p) => write_atomic(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(output: Option<&Path>, value: &T) -> Res<()> {
    emit(output, &to_text(value))
}

fn read_vector(path: &Path) -> Res<Vec<f64>> {
    let v = read_json(path)?;
    let v = match v {
        Value::Object(mut m) => m.remove("x").or_else(|| m.remove("input")).unwrap_or(Value::Null),
        other => other,
    };
    parse(path, v)
}

fn load_factorization(path: &Path) -> Res<Factorization> {
    let v = read_json(path)?;
    parse(path, v)
}

fn run(cli: Cli) -> Res<()> {
    match cli.cmd {
        Cmd::Normalize { input, pass, output } => {
            let pass: Pass = pass.parse().map_err(|m: String| Failure::Invalid { kind: "UnknownPass".into(), message: m })?;
            let (spec, _) = load_spec(&input)?;
            let g = run_pass(&spec, pass).map_err(invalid)?;
            info!("{} nodes, {} arcs", g.len(), g.edges().len());
            emit_json(output.as_deref(), &g.to_spec())
        }
        Cmd::Levelize { input, output } => {
            let (spec, _) = load_spec(&input)?;
            let g = normalize_io(&spec).map_err(invalid)?;
            emit_json(output.as_deref(), &assign_levels(&g))
        }
        Cmd::Factorize { input, output } => {
            let lg = load_normalized(&input)?;
            let f = factorize_levels(&lg).map_err(invalid)?;
            info!("depth {}", f.depth());
            emit_json(output.as_deref(), &f)
        }
        Cmd::VerifyInverse { lifting, trials, seed, tol } => {
            let f = load_factorization(&lifting)?;
            let report = verify_inverse(&f, trials, seed, tol).map_err(invalid)?;
            emit_json(None, &report)?;
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Verify { message: format!("inverse error {:.3e} above {tol:e}", report.max_single_error.max(report.max_chain_error)) })
            }
        }
        Cmd::Reconstruct { lifting, fold_relays, output } => {
            let f = load_factorization(&lifting)?;
            let g = reconstruct_graph(&f, fold_relays).map_err(invalid)?;
            emit_json(output.as_deref(), &g.to_spec())
        }
        Cmd::Allpair { input, form, upto, output } => {
            let lg = load_normalized(&input)?;
            let c = match (form, upto) {
                (Form::Inductive, None) => allpair_inductive(lg.graph()),
                (Form::Inductive, Some(_)) => {
                    return Err(Failure::Invalid { kind: "Usage".into(), message: "--upto needs --form product".into() })
                }
                (Form::Product, n) => {
                    let f = factorize_levels(&lg).map_err(invalid)?;
                    match n {
                        Some(n) => allpair_upto(&f, n),
                        None => allpair_product(&f),
                    }
                }
            }
            .map_err(invalid)?;
            emit_json(output.as_deref(), &c)
        }
        Cmd::Eval { graph, input, trace, pair } => {
            let lg = load_normalized(&graph)?;
            let x = read_vector(&input)?;
            if let Some(p) = pair {
                let y = subgraph_eval(lg.graph(), NodeId(p[0]), NodeId(p[1]), &x).map_err(invalid)?;
                return emit_json(None, &json!({ "pair": [p[0], p[1]], "y": y }));
            }
            let engine = Engine::from_levels(lg).map_err(invalid)?;
            let (y, t) = engine.forward_traced(&x).map_err(invalid)?;
            debug!("{} arc evaluations in {} us", t.arc_evals, t.wall_time_us);
            if let Some(path) = trace {
                write_atomic(&path, &to_text(&t))?;
            }
            emit_json(None, &json!({ "y": y }))
        }
        Cmd::CompleteSubgraphs { graph, output } => {
            let lg = load_normalized(&graph)?;
            emit_json(output.as_deref(), &completeness(&lg))
        }
        Cmd::Train { graph, data, steps, lr, lambda, seed, checkpoint_every, init, output } => {
            let (spec, ticket) = load_spec(&graph)?;
            let lg = normalize_spec(&spec).map_err(invalid)?;
            let dv = read_json(&data)?;
            let data: Dataset = parse(&data, dv)?;
            let init = match init {
                Init::Graph => InitMode::Graph,
                Init::Random => InitMode::Random,
            };
            let cfg = TrainConfig { steps, lr, lambda, seed, checkpoint_every, init, ..Default::default() };
            let mut run = train(&lg, &data, &cfg).map_err(invalid)?;
            run.provenance = ticket.map(|t| t.provenance);
            info!("loss {:.6e} -> {:.6e}", run.loss_trace[0], run.final_loss());
            emit_json(output.as_deref(), &run)
        }
        Cmd::Prune { run, at, tol, level, scan_all_levels, rescan, output } => {
            let v = read_json(&run)?;
            let r: TrainRun = parse(&run, v)?;
            let opts = RewindOptions { tol, level, scan_all: scan_all_levels, rescan };
            let ticket = rewind_prune(&r, at, &opts).map_err(invalid)?;
            info!("removed {:?}", ticket.removed_nodes);
            emit_json(output.as_deref(), &ticket)
        }
        Cmd::VerifyTicket { run0, run1 } => {
            let (v0, v1) = (read_json(&run0)?, read_json(&run1)?);
            let (r0, r1): (TrainRun, TrainRun) = (parse(&run0, v0)?, parse(&run1, v1)?);
            let report = verify_ticket(&r0, &r1);
            emit_json(None, &report)?;
            if report.applicable && !report.passed {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(Failure::Verify { message: format!("failed: {}", failed.join(", ")) });
            }
            Ok(())
        }
        Cmd::ExportDot { graph, normalized, output } => {
            let (spec, _) = load_spec(&graph)?;
            let g = if normalized {
                normalize_spec(&spec).map_err(invalid)?.into_graph()
            } else {
                normalize_io(&spec).map_err(invalid)?
            };
            emit(output.as_deref(), &export_dot(&g))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DAGDNN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, diag) = match f {
                Failure::Invalid { kind, message } => (1, json!({ "error": kind, "message": message, "exit_code": 1 })),
                Failure::Verify { message } => (2, json!({ "error": "VerificationFailed", "message": message, "exit_code": 2 })),
            };
            eprintln!("{diag}");
            ExitCode::from(code)
        }
    }
}
