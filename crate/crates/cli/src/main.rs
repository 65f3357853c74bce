use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csqn_cli::{cmd_report, cmd_run, cmd_sweep, Grid, RunOptions, VERSION};

#[derive(Parser)]
#[command(name = "csqn", version = VERSION, about = "Continual learning with quasi-Newton curvature penalties")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one task sequence and write R.csv, metrics.json, manifest.json and report.svg.
    Run(RunArgs),
    /// One run per grid value, e.g. `--grid lambda=1e2,1e3,1e4`; writes summary.json.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        grid: Grid,
    },
    /// Aggregate run directories into curves.csv, report.json and report.svg.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted override, e.g. `--set dataset.tasks=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = default_threads())]
    threads: usize,
    /// Directory with the MNIST IDX files.
    #[arg(long, env = "CSQN_DATA")]
    data: Option<PathBuf>,
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl From<RunArgs> for RunOptions {
    fn from(a: RunArgs) -> Self {
        RunOptions {
            config: a.config,
            overrides: a.overrides,
            out: a.out,
            seed: a.seed,
            threads: a.threads,
            data: a.data,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args.into()).map(|_| ()),
        Command::Sweep { run, grid } => cmd_sweep(&run.into(), &grid).map(|_| ()),
        Command::Report { dirs, out } => cmd_report(&dirs, out.as_deref()).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
