//! `rps-collusion`: train DQN campaigns and analyze their step logs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use collusion_core::analysis::{analyze_dir, AnalysisOptions, StageThresholds};
use collusion_core::harness::{run_campaign, ExperimentConfig, Scale};
use collusion_core::modes::{Mode, ModeKind};

#[derive(Parser)]
#[command(name = "rps-collusion", version, about = "Three-player rock-paper-scissors DQN collusion simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded training campaign and write one step log per run.
    Train(TrainArgs),
    /// Segment logged runs into stages and emit plot-ready CSV.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fair,
    Explicit,
    Implicit,
}

impl From<ModeArg> for ModeKind {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fair => ModeKind::Fair,
            ModeArg::Explicit => ModeKind::ExplicitComm,
            ModeArg::Implicit => ModeKind::ImplicitReward,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::PaperReplication,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config overlaid on the scale preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Learning rate(s); repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    lr: Vec<f64>,
    #[arg(long)]
    episodes: Option<u32>,
    #[arg(long)]
    steps: Option<u32>,
    /// Runs per learning rate.
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    /// Replace the fair agent with a uniform-random player (control campaign).
    #[arg(long)]
    fair_random: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config and run counts without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    plot_data: PathBuf,
    #[arg(long, default_value_t = 6)]
    max_period: usize,
    /// Episodes per distribution bucket.
    #[arg(long, default_value_t = 1)]
    bucket_size: u32,
    /// Analyze shaped instead of raw rewards.
    #[arg(long)]
    shaped: bool,
    /// TOML file overriding stage thresholds.
    #[arg(long)]
    thresholds: Option<PathBuf>,
}

fn resolve_config(args: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            if let Some(scale) = args.scale {
                let exp = table
                    .entry("experiment")
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                let Some(exp) = exp.as_table_mut() else {
                    bail!("{}: `experiment` must be a table", path.display());
                };
                exp.insert("scale".into(), toml::Value::String(Scale::from(scale).as_str().into()));
            }
            let text = toml::to_string(&table)?;
            ExperimentConfig::from_toml_str(&text, Scale::Desk).with_context(|| format!("config {}", path.display()))?
        }
        None => ExperimentConfig::preset(args.scale.map_or(Scale::Desk, Scale::from), Mode::fair()),
    };
    if let Some(kind) = args.mode {
        cfg.mode.kind = kind.into();
    }
    if args.fair_random {
        cfg.mode.fair_is_random = true;
        cfg.experiment.runs_per_lr = cfg.experiment.control_runs_per_lr;
    }
    if !args.lr.is_empty() {
        cfg.experiment.learning_rates = args.lr.clone();
    }
    if let Some(e) = args.episodes {
        cfg.experiment.episodes = e;
    }
    if let Some(s) = args.steps {
        cfg.experiment.steps_per_episode = s;
    }
    if let Some(r) = args.runs {
        cfg.experiment.runs_per_lr = r;
    }
    if let Some(s) = args.seed {
        cfg.experiment.base_seed = s;
    }
    if let Some(out) = &args.out {
        cfg.experiment.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args)?;
    if args.dry_run {
        print!("{}", cfg.to_toml());
        println!();
        print!("{}", cfg.protocol().render());
        return Ok(());
    }
    eprintln!(
        "training {} run(s) of {} games each, mode {}, into {}",
        cfg.total_runs(),
        cfg.games_per_run(),
        cfg.mode.tag(),
        cfg.experiment.output_dir.display()
    );
    let manifest = run_campaign(&cfg)?;
    for run in manifest.runs.iter().filter(|r| !r.complete) {
        eprintln!(
            "warning: run {} stopped after {} episode(s): {}",
            run.run_id,
            run.episodes_done,
            run.error.as_deref().unwrap_or("incomplete")
        );
    }
    println!(
        "wrote {} record(s) across {} run(s) to {}",
        manifest.total_records,
        manifest.runs.len(),
        cfg.experiment.output_dir.display()
    );
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let thresholds = match &args.thresholds {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<StageThresholds>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => StageThresholds::default(),
    };
    let opts = AnalysisOptions {
        max_period: args.max_period,
        bucket_size: args.bucket_size,
        use_shaped: args.shaped,
        thresholds,
        ..AnalysisOptions::default()
    };
    if opts.max_period == 0 {
        bail!("--max-period must be at least 1");
    }
    let out = analyze_dir(&args.input, &args.report, &args.plot_data, &opts)?;
    println!(
        "analyzed {} run(s); report {}; {} plot file(s) in {}",
        out.runs.len(),
        out.report.display(),
        out.files.len(),
        args.plot_data.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
