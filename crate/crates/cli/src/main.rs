use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use vtedit::pipeline::{Ablation, PipelineConfig, Stage};

/// Concept-driven editing of dynamic volumetric head avatars, desk scale.
#[derive(Parser, Debug)]
#[command(name = "vtedit", version)]
struct Cli {
    /// Pipeline config (TOML). Defaults to the built-in desk configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the built-in CI-sized configuration instead.
    #[arg(long, global = true, conflicts_with = "config")]
    ci: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted override, e.g. `--set avatar.train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise the multi-view video dataset and the class corpus.
    GenData,
    TrainAutoencoder,
    TrainDenoiser,
    TrainAvatar,
    SelectKeyframes,
    Finetune,
    Edit,
    Render,
    /// Compute metrics from rendered artifacts and print them as JSON.
    Eval,
    /// Run every stage in order.
    All,
    /// Print the resolved configuration.
    Config,
    Ablate {
        #[arg(value_enum)]
        which: AblationArg,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AblationArg {
    SharedNoise,
    Guidance,
    Anneal,
    NullEdit,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::SharedNoise => Ablation::SharedNoise,
            AblationArg::Guidance => Ablation::Guidance,
            AblationArg::Anneal => Ablation::Anneal,
            AblationArg::NullEdit => Ablation::NullEdit,
        }
    }
}

fn resolve(cli: &Cli) -> vtedit::Result<PipelineConfig> {
    let mut cfg = match (&cli.config, cli.ci) {
        (Some(p), _) => PipelineConfig::load(p)?,
        (None, true) => PipelineConfig::ci(),
        (None, false) => PipelineConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if !overrides.is_empty() {
        cfg = cfg.with_overrides(&overrides)?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    let stage = match &cli.command {
        Command::GenData => Some(Stage::GenData),
        Command::TrainAutoencoder => Some(Stage::TrainAutoencoder),
        Command::TrainDenoiser => Some(Stage::TrainDenoiser),
        Command::TrainAvatar => Some(Stage::TrainAvatar),
        Command::SelectKeyframes => Some(Stage::SelectKeyframes),
        Command::Finetune => Some(Stage::Finetune),
        Command::Edit => Some(Stage::Edit),
        Command::Render => Some(Stage::Render),
        Command::Eval => Some(Stage::Eval),
        _ => None,
    };
    if let Some(s) = stage {
        s.run(&cfg).with_context(|| format!("stage `{}` failed", s.name()))?;
        if s == Stage::Eval {
            print_metrics(&cfg)?;
        }
        return Ok(());
    }
    match &cli.command {
        Command::All => {
            for s in Stage::ALL {
                log::info!("running {}", s.name());
                s.run(&cfg).with_context(|| format!("stage `{}` failed", s.name()))?;
            }
            print_metrics(&cfg)?;
        }
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Ablate { which } => {
            let a = Ablation::from(*which);
            let table = a.run(&cfg).with_context(|| format!("ablation `{}` failed", a.name()))?;
            print!("{table}");
        }
        _ => unreachable!("stage commands handled above"),
    }
    Ok(())
}

fn print_metrics(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let p = vtedit::pipeline::require(cfg, Stage::Eval, vtedit::pipeline::stages::files::METRICS)?;
    println!("{}", std::fs::read_to_string(&p).with_context(|| p.display().to_string())?);
    Ok(())
}

/// 2: configuration, 3: missing upstream artifact, 4: numerical abort.
fn exit_code(err: &anyhow::Error) -> u8 {
    use vtedit::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::Parse { .. } | E::Version { .. }) => 2,
        Some(E::MissingDependency { .. }) => 3,
        Some(E::NonFinite { .. } | E::Diverged { .. } | E::Aborted(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VTEDIT_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
