use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use districa::config::{ExperimentConfig, Mode};
use districa::experiment::{compare_partial, run_experiment};
use districa::network::{er_graph, NetworkGraph};
use districa::trace::{emit_trace, read_trace, summarize, CSV_NAME};
use districa::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Distributed ICA over simulated sensor networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write trace.csv / trace.json.
    Run(RunArgs),
    /// Generate or inspect a network topology.
    Graph(GraphArgs),
    /// Summarize a trace directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; built-in defaults when omitted.
    config: Option<PathBuf>,
    #[arg(short, long, env = "DISTRICA_OUTPUT_DIR", default_value = "out")]
    output: PathBuf,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    runs: Option<usize>,
    /// Worker threads for Monte-Carlo runs (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct GraphArgs {
    /// Read this edge list instead of generating one.
    #[arg(long, conflicts_with_all = ["nodes", "seed"])]
    import: Option<PathBuf>,
    /// Write the edge list here (stdout otherwise).
    #[arg(long)]
    export: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    nodes: usize,
    #[arg(long, default_value_t = 5)]
    sensors: usize,
    #[arg(long, default_value_t = 0.8)]
    probability: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding trace.csv.
    dir: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
}

fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut c = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = args.nodes {
        c.nodes = n;
    }
    if let Some(n) = args.iters {
        c.iterations = n;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(m) = args.mode {
        c.mode = m;
    }
    if let Some(r) = args.runs {
        c.monte_carlo_runs = r;
    }
    c.validate()?;
    Ok(c)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn run(args: RunArgs) -> Result<()> {
    let config = resolve_config(&args)?;
    create_dir(&args.output)?;
    let csv = args.output.join(CSV_NAME);
    if config.mode == Mode::PartialSolve {
        let cmp = compare_partial(&config, args.jobs)?;
        emit_trace(&cmp.partial, &csv)?;
        emit_trace(&cmp.exact, &args.output.join("exact_trace.csv"))?;
        println!(
            "final aligned error ratio partial/exact: {:e}; communication identical: {}",
            cmp.final_ratio(),
            cmp.tallies_equal()
        );
    } else {
        let trace = run_experiment(&config, args.jobs)?;
        emit_trace(&trace, &csv)?;
        if let Some(last) = trace.rows.last() {
            println!(
                "{} runs, final median error {:e} (aligned {:e})",
                trace.runs.len(),
                last.epsilon_median,
                last.epsilon_aligned_median
            );
        }
    }
    println!("wrote {}", csv.display());
    Ok(())
}

fn graph(args: GraphArgs) -> Result<()> {
    let g = match &args.import {
        Some(p) => NetworkGraph::read_edge_list(p)?,
        None => er_graph(args.nodes, args.probability, vec![args.sensors; args.nodes], args.seed)?,
    };
    match &args.export {
        Some(p) => g.write_edge_list(p)?,
        None => print!("{}", g.to_edge_list()),
    }
    eprintln!(
        "{} nodes, {} edges, {} sensors, {} rejected draws",
        g.node_count(),
        g.edge_count(),
        g.total_channels(),
        g.resamples()
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let trace = read_trace(&args.dir.join(CSV_NAME))?;
    let s = summarize(&trace, args.threshold);
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:e}"));
    println!("iterations: {}", s.iterations);
    println!("runs: {}", s.runs);
    println!("final median error: {}", show(s.final_epsilon));
    println!("final median aligned error: {}", show(s.final_epsilon_aligned));
    match s.iterations_to_threshold {
        Some(i) => println!("aligned error below {:e} at iteration {i}", s.threshold),
        None => println!("aligned error never below {:e}", s.threshold),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Graph(a) => graph(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
