use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand};
use cocarry::pipeline::{self, PipelineError, Scenario, Stage};
use cocarry::Execution;

#[derive(Parser, Debug)]
#[command(name = "cocarry", version, about = "Ergonomic posture optimization and dual-arm co-carrying simulation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Scenario file (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve joint angles for every frame; writes ik.csv.
    Ik,
    /// Optimize the selected frame's posture; writes posture.json.
    Optimize,
    /// Map the optimized wrists to robot targets; writes targets.json.
    Posegen,
    /// Plan minimum-jerk end-effector paths; writes trajectory.csv.
    Plan,
    /// Simulate the controlled dual-arm plant; writes simulation.csv and simulation.json.
    Simulate,
    /// Run every stage and write report.json.
    Run {
        /// Run every *.toml scenario in this directory, one output subdirectory each.
        #[arg(long)]
        batch: Option<PathBuf>,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        match self {
            Command::Ik => Some(Stage::Ik),
            Command::Optimize => Some(Stage::Optimize),
            Command::Posegen => Some(Stage::Posegen),
            Command::Plan => Some(Stage::Plan),
            Command::Simulate => Some(Stage::Simulate),
            Command::Run { .. } => None,
        }
    }
}

fn usage_error(err: clap::Error) -> ExitCode {
    let _ = err.print();
    match err.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            ExitCode::SUCCESS
        }
        _ => {
            let mut cmd = Cli::command();
            cmd.build();
            let sub = std::env::args().skip(1).find(|a| cmd.find_subcommand(a).is_some());
            eprintln!();
            let help = match sub {
                Some(name) => cmd.find_subcommand_mut(&name).expect("checked").render_help(),
                None => cmd.render_help(),
            };
            eprint!("{help}");
            ExitCode::from(2)
        }
    }
}

fn load(global: &Global) -> Result<Scenario, PipelineError> {
    let path = global.config.as_deref().ok_or_else(|| PipelineError::Config("--config <file> is required".into()))?;
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = global.seed {
        scenario.config.seed = seed;
    }
    Ok(scenario)
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run_batch(dir: &Path, global: &Global, execution: Execution) -> Result<(), PipelineError> {
    let entries = pipeline::run_batch(dir, &global.out, global.seed, execution)?;
    let mut worst: Option<PipelineError> = None;
    for entry in entries {
        match entry.result {
            Ok(report) => println!("{}: ok ({})", entry.config.display(), global.out.join(&report.scenario).display()),
            Err(e) => {
                eprintln!("{}: {e}", entry.config.display());
                // a config error outranks a stage error for the exit code
                if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                    worst = Some(e);
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let execution = if cli.global.sequential { Execution::Sequential } else { Execution::Parallel };
    match &cli.command {
        Command::Run { batch: Some(_) } if cli.global.config.is_some() => {
            Err(PipelineError::Config("--batch and --config are mutually exclusive".into()))
        }
        Command::Run { batch: Some(dir) } => run_batch(dir, &cli.global, execution),
        Command::Run { batch: None } => {
            let scenario = load(&cli.global)?;
            log::info!("running scenario {} (seed {})", scenario.name, scenario.config.seed);
            let report = pipeline::run_pipeline(&scenario, &cli.global.out, execution)?;
            log::info!(
                "score {:.3} -> {:.3}, terminal error {:.2e} m",
                report.optimization.score_init.overall,
                report.optimization.score_opt.overall,
                report.simulation.terminal_error
            );
            println!("{}", cli.global.out.join(pipeline::REPORT_FILE).display());
            Ok(())
        }
        cmd => {
            let stage = cmd.stage().expect("stage subcommand");
            let scenario = load(&cli.global)?;
            log::info!("running {} for scenario {}", stage.name(), scenario.name);
            let run = pipeline::run_until(&scenario, stage, execution)?;
            report_written(&pipeline::write_stage_outputs(stage, &run, &cli.global.out)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return usage_error(e),
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
