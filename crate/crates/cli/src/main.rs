//! `stainkd`: dataset synthesis, teacher and student training, inference and
//! evaluation for dark-field digital staining.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Preset, Sources};

#[derive(Parser, Debug)]
#[command(name = "stainkd", version, about = "Knowledge-distilled digital staining of dark-field images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset defaults; overrides the file's `preset` key.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (`paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to resume from (training) or to load (infer, eval).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// `section.key=value`, repeatable; applied after the file.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the unpaired and misaligned datasets.
    SynthData(Common),
    /// Fit the light enhancer and train the colorizer.
    TrainTeacher(Common),
    /// Train the student on unpaired data.
    TrainUnpaired(Common),
    /// Train the student and the registration network on misaligned pairs.
    TrainPaired(Common),
    /// Stain dark-field PNGs with a trained student.
    Infer {
        #[command(flatten)]
        common: Common,
        /// A PNG or a directory of PNGs; defaults to the test split.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score a trained student on the test split.
    Eval(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let common = match &cli.command {
        Command::SynthData(c)
        | Command::TrainTeacher(c)
        | Command::TrainUnpaired(c)
        | Command::TrainPaired(c)
        | Command::Eval(c) => c,
        Command::Infer { common, .. } => common,
    };
    let sources = Sources {
        file: common.config.clone(),
        preset: common.preset,
        overrides: common.overrides.clone(),
        seed: common.seed,
        out: common.out.clone(),
    };
    let cfg = match config::resolve(&sources) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let ck = common.checkpoint.as_deref();
    let result = match &cli.command {
        Command::SynthData(_) => commands::synth_data(&cfg),
        Command::TrainTeacher(_) => commands::train_teacher(&cfg),
        Command::TrainUnpaired(_) => commands::train_student(&cfg, false, ck),
        Command::TrainPaired(_) => commands::train_student(&cfg, true, ck),
        Command::Infer { input, .. } => commands::infer(&cfg, ck, input.as_deref()),
        Command::Eval(_) => commands::eval(&cfg, ck),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
