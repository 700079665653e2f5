use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adarank::cli::{self, CliError, Command, EXIT_CONFIG, EXIT_IO};
use adarank::config::{RunConfig, DEFAULT_PROFILE};

#[derive(Parser)]
#[command(name = "adarank", version, about = "Desk-scale model merging lab")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration, overlaid on the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed offset (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Named preset: ta, cart, tsvm, adamerging-ablation, adarank.
    #[arg(long, global = true, default_value = DEFAULT_PROFILE)]
    profile: String,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the synthetic task suite.
    Gen,
    /// Pretrain and fine-tune one checkpoint per task.
    Train,
    /// Merge the fine-tuned checkpoints with the configured plan.
    Merge,
    /// Adapt masks and coefficients on unlabelled test inputs.
    Adapt,
    /// Write the accuracy table of every available model.
    Eval,
    /// Run the selected diagnostics.
    Analyze,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Gen => Command::Gen,
            Cmd::Train => Command::Train,
            Cmd::Merge => Command::Merge,
            Cmd::Adapt => Command::Adapt,
            Cmd::Eval => Command::Eval,
            Cmd::Analyze => Command::Analyze,
        }
    }
}

fn load_config(args: &Args) -> Result<RunConfig, CliError> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?,
        None => String::new(),
    };
    let mut cfg = RunConfig::from_toml(&text, &args.profile)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if let Some(n) = args.workers {
        if n == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_IO as u8);
        }
    }
    let result = load_config(&args).and_then(|cfg| cli::run(args.command.into(), &cfg, args.force));
    match result {
        Ok(report) => {
            println!("{}", report.dir.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
