mod config;
mod corpus;
mod inspect;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use kbmcts::bench::{compare_reports, load_report, run_bench, write_report, BenchDeps, BenchError, Method};
use kbmcts::kb::{build_kb, default_categories};
use kbmcts::problem::load_problem;
use kbmcts::search::{run_search, write_run_dir, SearchDeps};
use kbmcts::tokens::TokenLedger;

use config::EngineArgs;

#[derive(Parser)]
#[command(name = "kbmcts", version, about = "Knowledge-guided tree search for code generation")]
struct Cli {
    /// Log filter for stderr, e.g. `info` or `kbmcts=debug`; overrides RUST_LOG
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a knowledge base from a corpus of solved problems
    BuildKb(BuildKbArgs),
    /// Search for a solution to one problem
    Solve(SolveArgs),
    /// Evaluate a method over a dataset directory
    Bench(BenchArgs),
    /// Render a saved search tree
    InspectTree(InspectArgs),
}

#[derive(clap::Args)]
struct BuildKbArgs {
    /// Directory of `*.solution.json` files
    corpus: PathBuf,
    /// Output knowledge-base file
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated category labels [default: built-in list of 14]
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    /// TOML file with engine settings
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(clap::Args)]
struct SolveArgs {
    /// A `*.problem.json` file
    problem: PathBuf,
    /// Run directory [default: runs/<problem id>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with engine settings
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    RpmMcts,
    RpmMctsNoKb,
    BaseDirect,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::RpmMcts => Method::RpmMcts,
            MethodArg::RpmMctsNoKb => Method::RpmMctsNoKb,
            MethodArg::BaseDirect => Method::BaseDirect,
        }
    }
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Directory of `*.problem.json` files
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "rpm-mcts")]
    method: MethodArg,
    /// Report directory
    #[arg(long, default_value = "bench_out")]
    out: PathBuf,
    /// Another report directory to compare against
    #[arg(long)]
    compare: Option<PathBuf>,
    /// TOML file with engine settings
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(clap::Args)]
struct InspectArgs {
    /// Run directory or `tree.json`
    path: PathBuf,
}

/// An error together with the process exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitWith<T> {
    fn exit_with(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit_with(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

const EXIT_UNSOLVED: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_SETUP: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = match &cli.log {
        Some(f) => EnvFilter::new(f),
        None => EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
    };
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    let outcome = match cli.command {
        Command::BuildKb(a) => cmd_build_kb(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Bench(a) => cmd_bench(a),
        Command::InspectTree(a) => cmd_inspect(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_build_kb(args: BuildKbArgs) -> Result<u8, Failure> {
    let engine = args.engine.resolve(args.config.as_deref()).exit_with(EXIT_INPUT)?;
    let files = corpus::load_solutions(&args.corpus).exit_with(EXIT_INPUT)?;
    let gateway = if corpus::needs_decomposition(&files) {
        Some(engine.gateway(engine.backend().exit_with(EXIT_SETUP)?).exit_with(EXIT_SETUP)?)
    } else {
        None
    };
    let items = corpus::to_corpus(files, gateway.as_ref()).exit_with(EXIT_INPUT)?;
    let embedder = engine.embedder().exit_with(EXIT_SETUP)?;
    let categories = if args.categories.is_empty() {
        default_categories()
    } else {
        args.categories
    };
    let kb = build_kb(&items, embedder.as_ref(), &categories).exit_with(EXIT_INPUT)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).exit_with(EXIT_INPUT)?;
    }
    kb.save(&args.out).exit_with(EXIT_INPUT)?;

    let shards: Vec<String> = kb.categories().map(|(c, n)| format!("{c}={n}")).collect();
    println!("problems: {}", items.len());
    println!("entries: {}", kb.len());
    println!("categories: {}", shards.join(", "));
    Ok(0)
}

fn cmd_solve(args: SolveArgs) -> Result<u8, Failure> {
    let engine = args.engine.resolve(args.config.as_deref()).exit_with(EXIT_SETUP)?;
    let problem = load_problem(&args.problem).exit_with(EXIT_SETUP)?;
    let config = engine.search_config().exit_with(EXIT_SETUP)?;
    let gateway = engine
        .gateway(engine.backend().exit_with(EXIT_SETUP)?)
        .exit_with(EXIT_SETUP)?;
    let embedder = engine.embedder().exit_with(EXIT_SETUP)?;
    let kb = engine.knowledge_base(embedder.as_ref()).exit_with(EXIT_SETUP)?;
    let sandbox = engine.sandbox().exit_with(EXIT_SETUP)?;

    let deps = SearchDeps {
        gateway: &gateway,
        embedder: embedder.as_ref(),
        kb: kb.as_ref(),
        runner: &sandbox,
    };
    let result = run_search(&problem, &deps, &config).exit_with(EXIT_SETUP)?;
    let out = args
        .out
        .unwrap_or_else(|| Path::new("runs").join(&problem.id));
    write_run_dir(&out, &result, &gateway).exit_with(EXIT_SETUP)?;

    print!("{}", result.final_code);
    let _ = std::io::stdout().flush();
    if result.solved_in_sandbox {
        eprintln!(
            "solved in sandbox after {} iteration(s); run directory {}",
            result.iterations_used,
            out.display()
        );
        Ok(0)
    } else {
        eprintln!(
            "not verified after {} iteration(s); emitted code from the best path; run directory {}",
            result.iterations_used,
            out.display()
        );
        Ok(EXIT_UNSOLVED)
    }
}

fn cmd_bench(args: BenchArgs) -> Result<u8, Failure> {
    let engine = args.engine.resolve(args.config.as_deref()).exit_with(EXIT_SETUP)?;
    let method = Method::from(args.method);
    let config = engine.search_config().exit_with(EXIT_SETUP)?;
    let backend = engine.backend().exit_with(EXIT_SETUP)?;
    let embedder = engine.embedder().exit_with(EXIT_SETUP)?;
    let kb = if method == Method::RpmMcts {
        engine.knowledge_base(embedder.as_ref()).exit_with(EXIT_SETUP)?
    } else {
        None
    };
    let sandbox = engine.sandbox().exit_with(EXIT_SETUP)?;
    let ledger = Arc::new(TokenLedger::new());
    let deps = BenchDeps {
        backend,
        evaluator: engine.evaluator_backend().exit_with(EXIT_SETUP)?,
        sampling: engine.sampling(),
        embedder: embedder.as_ref(),
        kb: kb.as_ref(),
        runner: &sandbox,
        workers: engine.workers.unwrap_or(1),
        ledger: ledger.clone(),
    };
    let report = match run_bench(&args.dataset, method, &config, &deps) {
        Ok(r) => r,
        Err(e @ (BenchError::EmptyDataset(_) | BenchError::Problem(_))) => return Err(e).exit_with(EXIT_INPUT),
        Err(e) => return Err(e).exit_with(EXIT_SETUP),
    };
    write_report(&args.out, &report).exit_with(EXIT_SETUP)?;
    println!(
        "{}: pass@1 {:.4} ({}/{}), mean tokens {:.1}, total tokens {}",
        method.as_str(),
        report.pass_at_1,
        report.passed(),
        report.records.len(),
        report.mean_tokens,
        ledger.totals().total_tokens
    );
    if let Some(other) = &args.compare {
        let baseline = load_report(other).exit_with(EXIT_INPUT)?;
        let cmp = compare_reports(&report, &baseline).exit_with(EXIT_INPUT)?;
        print!("{}", cmp.to_text());
        std::fs::write(args.out.join("comparison.txt"), cmp.to_text()).exit_with(EXIT_SETUP)?;
        std::fs::write(args.out.join("comparison.csv"), cmp.to_csv()).exit_with(EXIT_SETUP)?;
    }
    Ok(0)
}

fn cmd_inspect(args: InspectArgs) -> Result<u8, Failure> {
    let tree = inspect::load_tree(&args.path)
        .context("loading search tree")
        .exit_with(EXIT_INPUT)?;
    print!("{}", inspect::render(&tree));
    Ok(0)
}
