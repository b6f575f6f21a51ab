use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use toda_bubbling::harness::{run, Command, RunConfig};
use toda_bubbling::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Solve,
    Kernel,
    Design,
    Recover,
    Verify,
    GreenCheck,
    Suite,
    Dump,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Solve => Command::Solve,
            Cmd::Kernel => Command::Kernel,
            Cmd::Design => Command::Design,
            Cmd::Recover => Command::Recover,
            Cmd::Verify => Command::Verify,
            Cmd::GreenCheck => Command::GreenCheck,
            Cmd::Suite => Command::Suite,
            Cmd::Dump => Command::Dump,
        }
    }
}

/// Exact solutions, kernels, node designs and verification checks for
/// singular SU(n+1) Toda systems.
#[derive(Debug, Parser)]
#[command(name = "toda", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the report and artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    };
    let result = cfg.and_then(|mut cfg| {
        if cli.seed.is_some() {
            cfg.seed = cli.seed;
        }
        run(cli.command.into(), &cfg, &cli.out)
    });
    match result {
        Ok(report) => {
            for c in &report.checks {
                println!("{}", c.line());
            }
            if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ Error::ConfigInvalid { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
