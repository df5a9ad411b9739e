use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tracing::info;

use evomerge::io::{self, ExperimentConfig, IoError, OracleMode};
use evomerge::lowrank::{self, LowRankError, PruneSide};
use evomerge::oracle::client::RemoteOracle;
use evomerge::oracle::{self, server, LocalOracle, Oracle, OracleError};
use evomerge::pipeline::{self, PipelineError};
use evomerge::synth::{self, SynthError, SynthWorld};

#[derive(Parser)]
#[command(name = "evomerge", version, about = "Black-box merging of low-rank adapters with CMA-ES")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// World directory written by `gen`; overrides the config's world source.
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it to disk.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both search stages and write the merged adapter and logs.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Remote fitness service root, e.g. http://127.0.0.1:8080.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Serve the fitness protocol for a world until interrupted.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = 8)]
        threads: usize,
    },
    /// Report the loss of a merge result or adapter container on a world.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of `merge`.
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Adapter container to evaluate as stored.
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Export Gini/Lorenz tables and the A-versus-B pruning study as CSV.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0.1,0.2,0.3,0.5,0.7,1.0")]
        grid: String,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Sample random (A, B, alpha) triples and check the pruning error bound.
    BoundCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        max_dim: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Bind(#[from] server::BindError),
    #[error("bound violated in {0} trials")]
    BoundViolated(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(IoError::Config(_)) => 2,
            CliError::Io(_) => 3,
            CliError::Synth(_) | CliError::LowRank(_) => 4,
            CliError::Oracle(_) => 5,
            CliError::Pipeline(_) => 6,
            CliError::Bind(_) => 7,
            CliError::BoundViolated(_) => 8,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn init_logging() {
    let level = match std::env::var("EVOMERGE_LOG").as_deref() {
        Ok("quiet") => "off",
        Ok("debug") => "debug",
        _ => "info",
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(format!("evomerge={level}")))
        .with_writer(std::io::stderr)
        .init();
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg.resolved(common.seed))
}

fn load_world(common: &Common, cfg: &ExperimentConfig) -> Result<SynthWorld> {
    if let Some(dir) = &common.world {
        return Ok(io::read_world(dir)?);
    }
    match (&cfg.synth, &cfg.repository) {
        (Some(spec), _) => Ok(synth::generate_world(spec)?),
        (None, Some(dir)) => Ok(io::read_world(dir)?),
        (None, None) => Err(CliError::Usage("config names no world".into())),
    }
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn cmd_gen(common: Common, out: PathBuf) -> Result<()> {
    let cfg = load_config(&common)?;
    let world = load_world(&common, &cfg)?;
    io::write_world(&out, &world)?;
    print_json(json!({
        "out": out,
        "adapters": world.repo.len(),
        "teacher_loss": world.teacher_loss,
        "base_loss": world.base_loss(),
    }));
    Ok(())
}

fn cmd_merge(common: Common, out: Option<PathBuf>, endpoint: Option<String>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(endpoint) = endpoint {
        cfg.oracle = OracleMode::Remote { endpoint };
    }
    let out = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("evomerge-run"));

    let world = load_world(&common, &cfg);
    let (repo, oracle): (_, Box<dyn Oracle>) = match (&cfg.oracle, world) {
        (OracleMode::Local, world) => {
            let world = Arc::new(world?);
            (world.repo.clone(), Box::new(LocalOracle::new(world)))
        }
        (OracleMode::Remote { endpoint }, Ok(world)) => (world.repo, Box::new(RemoteOracle::new(endpoint))),
        // A remote merge only needs the adapters, not the validation data.
        (OracleMode::Remote { endpoint }, Err(_)) => {
            let dir = common
                .world
                .as_ref()
                .or(cfg.repository.as_ref())
                .ok_or_else(|| CliError::Usage("remote merge needs --world or a repository path".into()))?;
            let adapters = if Path::new(dir).join("adapters").is_dir() { dir.join("adapters") } else { dir.clone() };
            (io::read_repository(&adapters)?, Box::new(RemoteOracle::new(endpoint)))
        }
    };

    let solution = pipeline::evo_merge(&repo, oracle.as_ref(), &cfg.stage1, &cfg.stage2)?;
    io::write_merge_output(&out, &cfg, &solution)?;
    info!(out = %out.display(), "merge written");
    print_json(json!({
        "out": out,
        "best_fitness_stage1": solution.best_fitness_stage1,
        "best_fitness_stage2": solution.best_fitness_stage2,
        "best_loss_stage2": solution.best_loss_stage2,
        "alphas_star": solution.alphas_star,
        "betas_star": solution.betas_star,
    }));
    Ok(())
}

fn cmd_serve(common: Common, bind: String, threads: usize) -> Result<()> {
    let cfg = load_config(&common)?;
    let world = Arc::new(load_world(&common, &cfg)?);
    let handle = server::serve(world, &bind, threads)?;
    println!("listening on {}", handle.endpoint());
    let (tx, rx) = std::sync::mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(|e| CliError::Usage(format!("cannot install signal handler: {e}")))?;
    let _ = rx.recv();
    handle.shutdown();
    Ok(())
}

fn cmd_eval(common: Common, solution: Option<PathBuf>, adapter: Option<PathBuf>) -> Result<()> {
    if solution.is_none() && adapter.is_none() {
        return Err(CliError::Usage("eval needs --solution or --adapter".into()));
    }
    let echoed = solution.as_ref().map(|d| d.join(io::CONFIG_ECHO_FILE)).filter(|p| p.is_file());
    let cfg = match (&common.config, echoed) {
        (None, Some(path)) if common.world.is_none() => ExperimentConfig::load(&path)?.resolved(common.seed),
        _ => load_config(&common)?,
    };
    let world = load_world(&common, &cfg)?;

    let mut report = serde_json::Map::new();
    if let Some(dir) = &solution {
        let record = io::read_solution(dir)?;
        let merged = lowrank::merge(&world.repo, &record.betas_star, &record.alphas_star)?;
        report.insert("loss".into(), json!(oracle::adapter_loss(&world, &merged)?));
        report.insert("recorded_best_loss".into(), json!(record.best_loss_stage2));
        let stored = dir.join(io::MERGED_DIR);
        if stored.is_dir() {
            let container = io::read_adapter(&stored)?;
            report.insert("container_loss".into(), json!(oracle::adapter_loss(&world, &container)?));
        }
    }
    if let Some(dir) = &adapter {
        let container = io::read_adapter(dir)?;
        report.insert("adapter_loss".into(), json!(oracle::adapter_loss(&world, &container)?));
    }
    report.insert("base_loss".into(), json!(world.base_loss()));
    report.insert("teacher_loss".into(), json!(world.teacher_loss));
    print_json(serde_json::Value::Object(report));
    Ok(())
}

fn parse_grid(grid: &str) -> Result<Vec<f64>> {
    grid.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("bad grid value {s:?}: {e}"))))
        .collect()
}

fn cmd_analyze(common: Common, grid: String, out: PathBuf) -> Result<()> {
    let cfg = load_config(&common)?;
    let world = load_world(&common, &cfg)?;
    let grid = parse_grid(&grid)?;
    let rows = synth::ab_sparsify_study(&world, &grid)?;

    let study: Vec<Vec<String>> = rows
        .iter()
        .map(|r| [r.alpha, r.loss_a, r.loss_b, r.gini_a, r.gini_b].iter().map(|v| format!("{v}")).collect())
        .collect();
    io::write_csv(&out.join("ab_study.csv"), &["alpha", "loss_a", "loss_b", "gini_a", "gini_b"], &study)?;

    let n = world.repo.len();
    let weights = vec![1.0 / n as f64; n];
    let mut lorenz_rows = Vec::new();
    for &alpha in &grid {
        for (side, label) in [(PruneSide::A, "A"), (PruneSide::B, "B")] {
            let merged = lowrank::merge_sided(&world.repo, &weights, &vec![alpha; n], side)?;
            let report = lowrank::concentration(&synth::delta_magnitudes(&merged)?)?;
            for (p, q) in report.lorenz {
                lorenz_rows.push(vec![format!("{alpha}"), label.to_string(), format!("{p}"), format!("{q}")]);
            }
        }
    }
    io::write_csv(&out.join("lorenz.csv"), &["alpha", "side", "population_fraction", "mass_fraction"], &lorenz_rows)?;
    print_json(json!({ "out": out, "rows": rows }));
    Ok(())
}

fn cmd_bound_check(trials: usize, seed: u64, max_dim: usize) -> Result<()> {
    if max_dim == 0 {
        return Err(CliError::Usage("--max-dim must be positive".into()));
    }
    let report = lowrank::sample_bound_check(trials, max_dim, seed)?;
    print_json(serde_json::to_value(&report).expect("serializable"));
    if report.violations > 0 {
        return Err(CliError::BoundViolated(report.violations));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let result = match cli.command {
        Command::Gen { common, out } => cmd_gen(common, out),
        Command::Merge { common, out, endpoint } => cmd_merge(common, out, endpoint),
        Command::Serve { common, bind, threads } => cmd_serve(common, bind, threads),
        Command::Eval { common, solution, adapter } => cmd_eval(common, solution, adapter),
        Command::Analyze { common, grid, out } => cmd_analyze(common, grid, out),
        Command::BoundCheck { trials, seed, max_dim } => cmd_bound_check(trials, seed, max_dim),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("evomerge: error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
