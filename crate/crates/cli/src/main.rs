//! `loadgroup`: synthetic load-group generation and evaluation pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use loadgroup_core::ganmodels::Preset;

use crate::commands::Ctx;
use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "loadgroup", version, about = "Generate and evaluate groups of synthetic load profiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file merged over the preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Global seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic meter corpus and its labeled positives.
    SynthData,
    /// Grid and window meter/temperature CSVs named under [ingest].
    Ingest,
    /// Train the single-profile generator.
    TrainSingle,
    /// Train the whole-group generator.
    TrainMulti,
    /// Build negative groups from the meter pool.
    Nsg,
    /// Train the realisticness classifier on positives and negatives.
    TrainDlc,
    /// Draw groups from the trained generators.
    Generate,
    /// Compare generated groups with real ones and write the report.
    Evaluate,
    /// Run the augmentation loop from the trained generator and classifier.
    Ada,
    /// Render an evaluation report and its plots.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Ingest => "ingest",
            Command::TrainSingle => "train-single",
            Command::TrainMulti => "train-multi",
            Command::Nsg => "nsg",
            Command::TrainDlc => "train-dlc",
            Command::Generate => "generate",
            Command::Evaluate => "evaluate",
            Command::Ada => "ada",
            Command::Report => "report",
        }
    }

    fn run(self, ctx: &Ctx) -> anyhow::Result<()> {
        match self {
            Command::SynthData => commands::synth_data(ctx),
            Command::Ingest => commands::ingest(ctx),
            Command::TrainSingle => commands::train_single(ctx),
            Command::TrainMulti => commands::train_multi(ctx),
            Command::Nsg => commands::nsg(ctx),
            Command::TrainDlc => commands::train_dlc(ctx),
            Command::Generate => commands::generate(ctx),
            Command::Evaluate => commands::evaluate(ctx),
            Command::Ada => commands::ada(ctx),
            Command::Report => commands::report(ctx),
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.preset.map(Preset::from), cli.seed)?;
    std::fs::create_dir_all(&cli.out)?;
    let resolved = cli.out.join(format!("{}.resolved.toml", cli.command.name()));
    std::fs::write(&resolved, cfg.to_toml()?)?;
    log::info!("{}: resolved configuration in {}", cli.command.name(), resolved.display());
    let ctx = Ctx {
        cfg,
        out: cli.out.clone(),
    };
    cli.command.run(&ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
