use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use poslab::kernels::ModelDims;
use poslab::verify::GRADCHECK_TOL;
use poslab_cli::{commands, exit_code, Outcome, RunConfig};

#[derive(Parser)]
#[command(name = "poslab", version, about = "Position-embedding laboratory for transformer encoders")]
struct Cli {
    /// Upper bound on worker threads; overrides the `workers` config key.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration file; defaults apply to every key it omits.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// `section.key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (`output_dir`).
    #[arg(short, long)]
    output: Option<PathBuf>,

    /// Training steps: `train.steps` for pretrain, `finetune.steps` otherwise.
    #[arg(long)]
    steps: Option<u64>,

    /// Position method (`encoder.method`), e.g. `shaw`, `m4+reset`, `m4:f=3`.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-language-model pretraining on a text corpus.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Corpus file (`train.corpus`).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter class.
    Gradcheck {
        /// A method label, or `all` for every kind.
        #[arg(long, default_value = "all")]
        method: String,
        #[arg(long, default_value_t = GRADCHECK_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form and enumerated position-parameter counts.
    Params {
        #[arg(long, default_value_t = 12)]
        m: usize,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 768)]
        d: usize,
        #[arg(long, default_value_t = 12)]
        h: usize,
        /// Give every head its own relative tables.
        #[arg(long)]
        unshared: bool,
    },
    /// Method x task x seed fine-tuning grid.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// `table2`, `table3` or `table4` (`compare.preset`).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Fine-tunes one model on each configured probe task.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Start from a pretrained checkpoint (`probe.checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Lists a checkpoint's arrays and checks its parameter count.
    AuditCheckpoint { path: PathBuf },
}

fn resolve(run: &RunArgs, workers: Option<usize>, steps_key: &str, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(run.set.iter().map(String::as_str))?;
    let mut flags: Vec<(&str, Option<String>)> = vec![
        ("seed", run.seed.map(|s| s.to_string())),
        ("output_dir", run.output.as_ref().map(|p| p.display().to_string())),
        (steps_key, run.steps.map(|s| s.to_string())),
        ("encoder.method", run.method.clone()),
        ("workers", workers.map(|w| w.to_string())),
    ];
    flags.extend(extra.iter().cloned());
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Outcome> {
    let out = &mut io::stdout().lock();
    match cli.command {
        Command::Pretrain { run, corpus } => {
            let corpus = corpus.map(|p| p.display().to_string());
            commands::pretrain(&resolve(&run, cli.workers, "train.steps", &[("train.corpus", corpus)])?, out)
        }
        Command::Gradcheck { method, tol, step, seed } => {
            commands::gradcheck(&commands::parse_methods(&method)?, tol, step, seed, out)
        }
        Command::Params { m, n, d, h, unshared } => commands::params(ModelDims::new(m, n, d, h), !unshared, out),
        Command::Compare { run, preset } => {
            commands::compare(&resolve(&run, cli.workers, "finetune.steps", &[("compare.preset", preset)])?, out)
        }
        Command::Probe { run, checkpoint } => {
            let checkpoint = checkpoint.map(|p| p.display().to_string());
            commands::probe(&resolve(&run, cli.workers, "finetune.steps", &[("probe.checkpoint", checkpoint)])?, out)
        }
        Command::AuditCheckpoint { path } => commands::audit_checkpoint(&path, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    ExitCode::from(exit_code(&result))
}
