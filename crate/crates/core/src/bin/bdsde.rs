use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bdsde::experiment::presets::preset_table;
use bdsde::experiment::{error_record, run, ExperimentConfig, ExperimentKind, Overrides, OUT_DIR_ENV};
use bdsde::model::conditions::SampleSpec;
use bdsde::Error;

/// Experiment runner for the BDSDE solver. Each experiment subcommand takes a TOML config.
#[derive(Parser)]
#[command(name = "bdsde", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in the config file.
    Run(RunArgs),
    /// Print the built-in coefficient presets with their condition status.
    ListPresets,
    /// Run a named experiment (check-conditions, solve-bdsde, ...); the config must name the same experiment.
    #[command(external_subcommand)]
    Experiment(Vec<String>),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Path to the TOML config.
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's output_dir, then $BDSDE_OUT_DIR, then ./bdsde-out).
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
}

#[derive(Parser)]
#[command(no_binary_name = true)]
struct ExperimentArgs {
    #[command(flatten)]
    args: RunArgs,
}

fn execute(args: RunArgs, expected: Option<ExperimentKind>) -> Result<(), Error> {
    let config = ExperimentConfig::load(&args.config)?;
    if let Some(kind) = expected {
        if kind != config.experiment {
            return Err(Error::Config(format!(
                "subcommand '{}' does not match the config's experiment '{}'",
                kind.name(),
                config.experiment.name()
            )));
        }
    }
    let summary = run(config, &Overrides { seed: args.seed, out: args.out })?;
    println!("experiment: {}", summary.experiment);
    println!("output: {}", summary.output_dir.display());
    for (k, v) in &summary.results {
        println!("{k} = {v}");
    }
    for (k, v) in &summary.flags {
        println!("{k} = {v}");
    }
    Ok(())
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("{}", error_record(err));
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => execute(args, None),
        Command::ListPresets => preset_table(SampleSpec { samples: 2000, terminal_paths: 100, ..SampleSpec::default() })
            .map(|t| print!("{t}")),
        Command::Experiment(words) => {
            let kind = match words[0].parse::<ExperimentKind>() {
                Ok(k) => k,
                Err(e) => return fail(&e),
            };
            match ExperimentArgs::try_parse_from(&words[1..]) {
                Ok(a) => execute(a.args, Some(kind)),
                Err(e) => {
                    let _ = e.print();
                    return ExitCode::from(2);
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
