//! Command-line front end. One binary, five subcommands:
//!
//! * `parse`: netlist to typed graph, summary plus canonical JSON file;
//! * `train`: policy training run, checkpoint plus training log;
//! * `baseline`: open-loop optimal control for one netlist and reference;
//! * `bench`: policy-versus-baseline evaluation over a sampled fleet;
//! * `config`: show defaults or echo a validated configuration.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or parse error.

mod config;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use voltgraph::bench::{self, BenchConfig, TrainingSampler};
use voltgraph::checkpoint;
use voltgraph::dpc::{self, Scenario};
use voltgraph::gnn::GnnConfig;
use voltgraph::netlist::{parse_netlist, validate_buck, NodeType};
use voltgraph::ocp;
use voltgraph::plant::TaskContext;
use voltgraph::ConverterGraph64;

#[derive(Parser)]
#[command(
    name = "voltgraph",
    version,
    about = "Graph-based converter control: parse netlists, train policies, run baselines, benchmark"
)]
struct Cli {
    /// Worker threads (0 = all available cores; 1 = fully serial,
    /// bit-reproducible)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a netlist and print its graph summary
    Parse(ParseArgs),
    /// Train a control policy by differentiating through plant rollouts
    Train(TrainArgs),
    /// Solve the open-loop control baseline for one netlist and reference
    Baseline(BaselineArgs),
    /// Evaluate a trained policy against the baseline over a sampled fleet
    Bench(BenchArgs),
    /// Show configuration defaults or echo a validated file
    Config(ConfigArgs),
}

#[derive(Args)]
struct ParseArgs {
    /// Netlist file to parse
    netlist: PathBuf,
    /// Print the summary as JSON instead of text
    #[arg(long)]
    json: bool,
    /// Canonical graph output path (default: input path + ".graph.json")
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration TOML
    #[arg(long)]
    config: PathBuf,
    /// Directory for the checkpoint, training log, and echoed config
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    /// Netlist of the converter to solve
    netlist: PathBuf,
    /// Voltage reference to track
    #[arg(long)]
    v_ref: f64,
    /// Conversion ratio whose equilibrium is the initial state
    #[arg(long, default_value_t = 0.5)]
    duty0: f64,
    /// Horizon in steps (default: the [train] horizon)
    #[arg(long)]
    horizon: Option<usize>,
    /// Run configuration TOML (defaults used when absent)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the solved trajectory as CSV to this path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Run configuration TOML
    #[arg(long)]
    config: PathBuf,
    /// Trained policy checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for report.csv, summary.json, and the echoed config
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Override the number of sampled configurations
    #[arg(long)]
    n_configs: Option<usize>,
    /// Override the number of cases per configuration
    #[arg(long)]
    cases: Option<usize>,
    /// Replace the [bench] section with the narrowed smoke preset
    #[arg(long)]
    smoke: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// Print the default configuration as TOML
    #[arg(long)]
    dump_defaults: bool,
    /// Validate and echo this configuration file
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Failure with its exit code class. Clap reports its own usage errors
/// with exit code 2 before this is ever constructed.
enum AppError {
    /// Wrong invocation or unparsable input: exit code 2.
    Usage(String),
    /// Valid invocation that failed while running: exit code 1.
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> AppError {
    AppError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(AppError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(runtime)?;
    }
    match &cli.command {
        Command::Parse(args) => cmd_parse(args),
        Command::Train(args) => cmd_train(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Config(args) => cmd_config(args),
    }
}

fn type_key(t: NodeType) -> &'static str {
    match t {
        NodeType::Net => "net",
        NodeType::Switch => "switch",
        NodeType::Diode => "diode",
        NodeType::Inductor => "inductor",
        NodeType::Capacitor => "capacitor",
        NodeType::Resistor => "resistor",
        NodeType::VoltageSource => "voltage_source",
    }
}

fn type_histogram(graph: &ConverterGraph64) -> [(&'static str, usize); 7] {
    let mut counts = [0usize; 7];
    for node in 0..graph.node_count() {
        counts[graph.node_type(node).index()] += 1;
    }
    let mut out = [("", 0); 7];
    for (slot, (t, &n)) in out.iter_mut().zip(NodeType::ALL.iter().zip(&counts)) {
        *slot = (type_key(*t), n);
    }
    out
}

fn cmd_parse(args: &ParseArgs) -> Result<(), AppError> {
    let text = std::fs::read_to_string(&args.netlist).map_err(|e| {
        AppError::Usage(format!("cannot read '{}': {e}", args.netlist.display()))
    })?;
    let graph: ConverterGraph64 = parse_netlist(&text).map_err(|e| {
        AppError::Usage(format!("{}: {e}", args.netlist.display()))
    })?;

    let out_path = args.out.clone().unwrap_or_else(|| {
        PathBuf::from(format!("{}.graph.json", args.netlist.display()))
    });
    let canonical =
        serde_json::to_string_pretty(&graph).expect("graph serializes to JSON");
    std::fs::write(&out_path, canonical + "\n").map_err(runtime)?;

    let histogram = type_histogram(&graph);
    if args.json {
        let mut types = serde_json::Map::new();
        for (key, n) in histogram {
            types.insert(key.to_string(), serde_json::json!(n));
        }
        let summary = serde_json::json!({
            "components": graph.components.len(),
            "nets": graph.nets.len(),
            "edges": graph.edges.len(),
            "types": types,
            "graph_file": out_path.display().to_string(),
        });
        println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    } else {
        println!(
            "components={} nets={} edges={}",
            graph.components.len(),
            graph.nets.len(),
            graph.edges.len()
        );
        let parts: Vec<String> = histogram
            .iter()
            .map(|(key, n)| format!("{key}={n}"))
            .collect();
        println!("types: {}", parts.join(" "));
        println!("graph written to {}", out_path.display());
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), AppError> {
    let config = RunConfig::load(&args.config).map_err(AppError::Usage)?;
    std::fs::create_dir_all(&args.out_dir).map_err(runtime)?;
    std::fs::write(args.out_dir.join("config.toml"), config.to_toml()).map_err(runtime)?;

    let sampler = TrainingSampler::new(config.bench, config.plant);
    let mut log = Vec::new();
    // Progress to stderr so stdout stays a clean artifact.
    let every = (config.train.steps / 20).max(1);
    let total = config.train.steps;
    let on_step = |row: &voltgraph::dpc::StepLog| {
        if (row.step + 1).is_multiple_of(every) || row.step + 1 == total {
            eprintln!(
                "step {}/{} loss {:.3e} tracking {:.3e} penalty {:.3e} ({:.1} s)",
                row.step + 1,
                total,
                row.mean_loss,
                row.mean_tracking,
                row.mean_penalty,
                row.wall_time_s
            );
        }
    };
    let outcome = dpc::train::<f64, _>(config.gnn, &config.train, &sampler, &mut log, on_step);

    let log_path = args.out_dir.join("training_log.csv");
    let mut log_file = std::fs::File::create(&log_path).map_err(runtime)?;
    dpc::write_training_log(&mut log_file, &log).map_err(runtime)?;

    match outcome {
        Ok(params) => {
            let ckpt_path = args.out_dir.join("policy.ckpt");
            checkpoint::save_policy_file(&ckpt_path, &params, config.train.seed)
                .map_err(runtime)?;
            if let Some(last) = log.last() {
                println!(
                    "trained {} steps in {:.1} s; final loss {:e} (tracking {:e}, penalty {:e})",
                    log.len(),
                    last.wall_time_s,
                    last.mean_loss,
                    last.mean_tracking,
                    last.mean_penalty
                );
            }
            println!("checkpoint written to {}", ckpt_path.display());
            println!("training log written to {}", log_path.display());
            Ok(())
        }
        Err(e) => Err(AppError::Runtime(format!(
            "training failed after {} completed steps: {e} (partial log retained at {})",
            log.len(),
            log_path.display()
        ))),
    }
}

fn load_scenario(
    netlist_path: &Path,
    v_ref: f64,
    duty0: f64,
    horizon: usize,
    config: &RunConfig,
) -> Result<Scenario<f64>, AppError> {
    let text = std::fs::read_to_string(netlist_path).map_err(|e| {
        AppError::Usage(format!("cannot read '{}': {e}", netlist_path.display()))
    })?;
    let graph: ConverterGraph64 = parse_netlist(&text).map_err(|e| {
        AppError::Usage(format!("{}: {e}", netlist_path.display()))
    })?;
    let plant = validate_buck(&graph).map_err(|e| {
        AppError::Usage(format!("{}: {e}", netlist_path.display()))
    })?;
    if !(duty0 > 0.0 && duty0 < 1.0) {
        return Err(AppError::Usage(format!(
            "--duty0 must lie strictly inside (0, 1), got {duty0}"
        )));
    }
    let task = TaskContext::with_default_limit(v_ref, &plant, &config.plant);
    Scenario::from_graph(
        graph,
        task,
        plant.equilibrium(duty0),
        horizon,
        &config.plant,
    )
    .map_err(|e| AppError::Usage(e.to_string()))
}

fn cmd_baseline(args: &BaselineArgs) -> Result<(), AppError> {
    let config = match &args.config {
        Some(path) => RunConfig::load(path).map_err(AppError::Usage)?,
        None => RunConfig::default(),
    };
    let horizon = args.horizon.unwrap_or(config.train.horizon);
    let scenario = load_scenario(&args.netlist, args.v_ref, args.duty0, horizon, &config)?;

    let solution = ocp::solve(&scenario, &config.ocp).map_err(runtime)?;
    let mean_duty =
        solution.duty_sequence.iter().sum::<f64>() / solution.duty_sequence.len() as f64;
    println!(
        "cost={:e} tracking={:e} penalty={:e} iterations={} converged={} mean_duty={:.4}",
        solution.cost,
        solution.tracking_cost,
        solution.penalty,
        solution.iterations,
        solution.converged,
        mean_duty
    );

    if let Some(out) = &args.out {
        let trajectory = ocp::replay(&scenario, &solution.duty_sequence).map_err(runtime)?;
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent).map_err(runtime)?;
        }
        let mut file = std::fs::File::create(out).map_err(runtime)?;
        ocp::write_trajectory_csv(&mut file, &trajectory).map_err(runtime)?;
        println!("trajectory written to {}", out.display());
    }
    Ok(())
}

/// Field-by-field comparison of checkpoint and configured architectures;
/// `None` when they agree.
fn architecture_mismatch(checkpoint: &GnnConfig, configured: &GnnConfig) -> Option<String> {
    let mut diffs = Vec::new();
    let mut check = |name: &str, found: String, expected: String| {
        if found != expected {
            diffs.push(format!("{name} is {found} in the checkpoint but {expected} in the config"));
        }
    };
    check("layers", checkpoint.layers.to_string(), configured.layers.to_string());
    check("d_h", checkpoint.d_h.to_string(), configured.d_h.to_string());
    check("d_m", checkpoint.d_m.to_string(), configured.d_m.to_string());
    check("d_g", checkpoint.d_g.to_string(), configured.d_g.to_string());
    check("d_x", checkpoint.d_x.to_string(), configured.d_x.to_string());
    check("d_e", checkpoint.d_e.to_string(), configured.d_e.to_string());
    check("d_z", checkpoint.d_z.to_string(), configured.d_z.to_string());
    check(
        "mlp_hidden",
        checkpoint.mlp_hidden.to_string(),
        configured.mlp_hidden.to_string(),
    );
    check(
        "aggregator",
        checkpoint.aggregator.to_string(),
        configured.aggregator.to_string(),
    );
    if diffs.is_empty() {
        None
    } else {
        Some(diffs.join("; "))
    }
}

fn cmd_bench(args: &BenchArgs) -> Result<(), AppError> {
    let mut config = RunConfig::load(&args.config).map_err(AppError::Usage)?;
    if args.smoke {
        config.bench = BenchConfig::smoke();
    }
    if let Some(n) = args.n_configs {
        config.bench.n_configs = n;
    }
    if let Some(n) = args.cases {
        config.bench.cases_per_config = n;
    }
    config.validate().map_err(AppError::Usage)?;

    let (params, _seed) =
        checkpoint::load_policy_file::<f64>(&args.checkpoint).map_err(runtime)?;
    if let Some(diffs) = architecture_mismatch(params.config(), &config.gnn) {
        return Err(AppError::Runtime(format!(
            "checkpoint architecture does not match the [gnn] config: {diffs}"
        )));
    }

    let mut report =
        bench::evaluate(&params, &config.bench, &config.ocp, &config.plant).map_err(runtime)?;
    report.checkpoint_hash = Some(checkpoint::sha256_file(&args.checkpoint).map_err(runtime)?);

    std::fs::create_dir_all(&args.out_dir).map_err(runtime)?;
    std::fs::write(args.out_dir.join("config.toml"), config.to_toml()).map_err(runtime)?;
    let netlist_dir = args.out_dir.join("netlists");
    std::fs::create_dir_all(&netlist_dir).map_err(runtime)?;
    for sampled in bench::sample_configs::<f64>(&config.bench) {
        std::fs::write(
            netlist_dir.join(format!("config_{}.cir", sampled.id)),
            &sampled.netlist,
        )
        .map_err(runtime)?;
    }
    let report_path = args.out_dir.join("report.csv");
    let mut report_file = std::fs::File::create(&report_path).map_err(runtime)?;
    bench::write_report_csv(&mut report_file, &report).map_err(runtime)?;
    let summary_path = args.out_dir.join("summary.json");
    let mut summary_file = std::fs::File::create(&summary_path).map_err(runtime)?;
    bench::write_summary_json(&mut summary_file, &report).map_err(runtime)?;

    match &report.stats {
        Some(stats) => println!(
            "median relative gap: {:.4} ({:.2}%) over {} of {} cases",
            stats.median,
            stats.median * 100.0,
            report.counts.included,
            report.counts.cases
        ),
        None => println!(
            "median relative gap: undefined (no clean cases out of {})",
            report.counts.cases
        ),
    }
    println!("report written to {}", report_path.display());
    println!("summary written to {}", summary_path.display());
    Ok(())
}

fn cmd_config(args: &ConfigArgs) -> Result<(), AppError> {
    if args.dump_defaults {
        print!("{}", RunConfig::default().to_toml());
        return Ok(());
    }
    if let Some(path) = &args.config {
        let config = RunConfig::load(path).map_err(AppError::Usage)?;
        print!("{}", config.to_toml());
        return Ok(());
    }
    Err(AppError::Usage(
        "pass --dump-defaults or --config <file>".to_string(),
    ))
}
