use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cardialign::align::AlignMode;
use cardialign::cohort::Phase;
use cardialign::pipeline::{run_stage, RunConfig, Stage};
use cardialign::{DType, Result};

#[derive(Parser)]
#[command(
    name = "cardialign",
    version,
    about = "Dual-phase ECG/CMR representation learning pipeline"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Output root; every stage reads and writes under it.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// TOML run configuration layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cohort size.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true, value_parser = parse_dtype)]
    precision: Option<DType>,
    /// Override any config key, e.g. `--set vit.layers=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort.
    Synth,
    /// Masked-autoencoder pretraining of the ECG encoder.
    PretrainEcg,
    /// Train one phase's volume encoder on phenotype regression.
    TrainCmr {
        #[arg(long, value_parser = parse_phase)]
        phase: Phase,
    },
    /// Contrastive alignment of the ECG encoder to the frozen volume encoders.
    Align {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AlignMode>,
    },
    /// Train downstream heads on every configured embedding source.
    TrainHeads,
    /// Collect head metrics into the results table.
    Eval,
    /// Pretrain and probe each encoder size preset.
    AblateVit,
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the built-in defaults as TOML.
    PrintDefaults,
    /// Print the configuration after applying --config and overrides.
    Show,
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    match s {
        "f64" => Ok(DType::F64),
        "f32" => Ok(DType::F32),
        _ => Err(format!("unknown precision {s:?} (f64, f32)")),
    }
}

fn parse_phase(s: &str) -> std::result::Result<Phase, String> {
    s.parse().map_err(|e: cardialign::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<AlignMode, String> {
    s.parse().map_err(|e: cardialign::Error| e.to_string())
}

fn resolve(g: &Global) -> Result<RunConfig> {
    let mut sets = Vec::new();
    if let Some(t) = g.threads {
        sets.push(format!("threads={t}"));
    }
    if let Some(s) = g.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(n) = g.n {
        sets.push(format!("cohort.n_subjects={n}"));
    }
    if let Some(p) = g.precision {
        sets.push(format!("precision=\"{}\"", if p == DType::F64 { "f64" } else { "f32" }));
    }
    sets.extend(g.sets.iter().cloned());
    RunConfig::resolve(g.config.as_deref(), &sets)
}

fn run(cli: Cli) -> Result<()> {
    let stage = match cli.command {
        Command::Config { action } => {
            let cfg = match action {
                ConfigAction::PrintDefaults => RunConfig::default(),
                ConfigAction::Show => resolve(&cli.global)?,
            };
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
        Command::Synth => Stage::Synth,
        Command::PretrainEcg => Stage::PretrainEcg,
        Command::TrainCmr { phase } => Stage::TrainCmr(phase),
        Command::Align { mode } => {
            let cfg = resolve(&cli.global)?;
            Stage::Align(mode.unwrap_or(cfg.align.mode))
        }
        Command::TrainHeads => Stage::TrainHeads,
        Command::Eval => Stage::Eval,
        Command::AblateVit => Stage::AblateVit,
    };
    let cfg = resolve(&cli.global)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| cardialign::Error::Config(format!("thread pool: {e}")))?;
    }
    let summary = run_stage(stage, &cfg, &cli.global.out)?;
    println!("{stage}: {summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
