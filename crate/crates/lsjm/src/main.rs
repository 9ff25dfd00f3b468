use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsjm::commands::{self, Log, Overrides, Status};

/// Location-scale joint models for a longitudinal marker and competing events.
#[derive(Debug, Parser)]
#[command(name = "lsjm", version)]
struct Cli {
    /// Suppress progress lines; warnings and errors are still printed.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the configured model; writes fit.json and fit_table.txt.
    Fit(Common),
    /// Simulate one dataset from a scenario; writes longitudinal.csv and survival.csv.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Dynamic event probabilities and marker bands; writes predictions.csv and bands.csv.
    Predict(Common),
    /// Predicted versus Nelson-Aalen cumulative hazards; writes gof_event<k>.csv.
    Gof(Common),
    /// Simulate and fit replicate datasets; writes replicate_summary.csv.
    Replicate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Number of replicates.
        #[arg(long)]
        r: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// QMC draws of the first estimation step.
    #[arg(long)]
    s1: Option<usize>,
    /// QMC draws of the second estimation step.
    #[arg(long)]
    s2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: LSJM_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Preset design, A to E.
    #[arg(long)]
    scenario: Option<String>,
    /// Subjects per dataset.
    #[arg(long)]
    n: Option<usize>,
}

fn overrides(c: &Common, s: Option<&ScenarioArgs>, replicates: Option<usize>) -> Overrides {
    Overrides {
        s1: c.s1,
        s2: c.s2,
        seed: c.seed,
        threads: c.threads,
        out: c.out.clone(),
        scenario: s.and_then(|s| s.scenario.clone()),
        n: s.and_then(|s| s.n),
        replicates,
    }
}

fn run(cli: &Cli, log: Log) -> lsjm::Result<Status> {
    let (common, over) = match &cli.command {
        Command::Fit(c) | Command::Predict(c) | Command::Gof(c) => (c, overrides(c, None, None)),
        Command::Simulate { common, scenario } => (common, overrides(common, Some(scenario), None)),
        Command::Replicate { common, scenario, r } => (common, overrides(common, Some(scenario), *r)),
    };
    let needs_config = matches!(cli.command, Command::Fit(_) | Command::Predict(_) | Command::Gof(_));
    if needs_config && common.config.is_none() {
        return Err(lsjm::Error::Config("--config is required for this command".into()));
    }
    let mut config = commands::load_config(common.config.as_deref())?;
    over.apply(&mut config)?;
    match &cli.command {
        Command::Fit(_) => commands::run_fit(&config, log),
        Command::Simulate { .. } => commands::run_simulate(&config, log),
        Command::Predict(_) => commands::run_predict(&config, log),
        Command::Gof(_) => commands::run_gof(&config, log),
        Command::Replicate { .. } => commands::run_replicate_command(&config, log),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let log = Log { quiet: cli.quiet };
    match run(&cli, log) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => ExitCode::from(2),
        Err(e) => {
            log.error(&[("msg", &e)]);
            ExitCode::from(1)
        }
    }
}
