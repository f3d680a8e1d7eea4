mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use streamforge::config::{Preset, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "streamforge", version, about = "Causal few-step distillation and streaming on a Gaussian world")]
struct Cli {
    /// TOML file whose keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Smoke,
    Desk,
    PaperScaleDoc,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Smoke => Preset::Smoke,
            PresetArg::Desk => Preset::Desk,
            PresetArg::PaperScaleDoc => Preset::PaperScaleDoc,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate condition bundles and the teacher ODE dataset.
    GenData,
    /// Regress the student onto the teacher trajectories.
    TrainOde(commands::TrainArgs),
    /// Distribution-matching distillation from the ODE student.
    TrainDmd(commands::DmdArgs),
    /// Stream one long clip through the engine.
    Stream(commands::StreamArgs),
    /// Sequential versus pipelined throughput with synthetic stage delays.
    Bench(commands::BenchArgs),
    /// Fréchet, sync, exposure and drift metrics of a generator.
    Eval(commands::CheckpointArg),
    /// The recipe ablation table.
    Ablate(commands::AblateArgs),
    /// Print the resolved configuration.
    Config,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let preset = cli.preset.map(Preset::from);
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml_over(preset, &text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::preset(preset.unwrap_or_default()),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STREAMFORGE_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("STREAMFORGE_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainOde(a) => commands::train_ode(&cfg, &a),
        Command::TrainDmd(a) => commands::train_dmd(&cfg, &a),
        Command::Stream(a) => commands::stream(&cfg, &a),
        Command::Bench(a) => commands::bench(&cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Ablate(a) => commands::ablate(&cfg, &a),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
