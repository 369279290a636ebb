//! `weaver`: run episodes, groups, evaluations, ablations, and dataset
//! builds over synthetic or remote-backed videos.
//!
//! Exit status: 0 on success, 1 when a task or I/O step fails, 2 on usage
//! errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "weaver", version, about = "Tool-augmented video reasoning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Task file (JSONL, one task per line).
    #[arg(long)]
    pub tasks: PathBuf,
    /// World file: one world or a JSON array of worlds.
    #[arg(long)]
    pub world: PathBuf,
    /// scripted:<oracle|fallback|no-tools|never-answer>, remote:<url>, or replay:<file>.
    #[arg(long, default_value = "scripted:oracle")]
    pub policy: String,
    /// Enabled tools: `all`, `none`, or a comma list of names.
    #[arg(long, default_value = "all")]
    pub tools: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// key=value file overriding defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    /// Send tool calls to this server instead of the synthetic oracle.
    #[arg(long)]
    pub tool_server: Option<String>,
    /// Append every policy exchange to this replay log.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One episode per task; trajectories as JSONL.
    Rollout(RunArgs),
    /// A rollout group per task; RL records with advantages.
    Group(RunArgs),
    /// Accuracy and tool-usage report.
    Eval(RunArgs),
    /// Re-run the evaluation with restricted tool subsets.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Tool subset per row (repeatable); default adds one tool per row.
        #[arg(long = "subset")]
        subsets: Vec<String>,
    },
    /// Filter, rewrite, and refine tasks into SFT records and an RL pool.
    BuildDataset(RunArgs),
    /// Generate a synthetic world, or a task set with its worlds.
    GenWorld {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Generate this many tasks; `--out` is then a directory.
        #[arg(long)]
        n_tasks: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print trajectories in readable form.
    Inspect { file: PathBuf },
    /// Recompute a report from a trajectory or SFT file.
    Stats { file: PathBuf },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failed(m) => write!(f, "error: {m}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Rollout(args) => commands::rollout(&args),
        Command::Group(args) => commands::group(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Ablate { run, subsets } => commands::ablate(&run, &subsets),
        Command::BuildDataset(args) => commands::build_dataset(&args),
        Command::GenWorld { seed, n_tasks, out } => commands::gen_world(seed, n_tasks, out.as_deref()),
        Command::Inspect { file } => commands::inspect(&file),
        Command::Stats { file } => commands::stats(&file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
