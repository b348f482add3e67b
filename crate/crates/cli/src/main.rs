use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reasonrec::pipeline::{self, RunConfig, StoreChoice, Variant};
use reasonrec::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "reasonrec", version, about = "Reason-augmented sequential recommendation pipeline")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `out_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Caps the worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, filter and split the ratings.
    Prepare,
    /// Align the surrogate policy on the rule reward.
    Pretrain,
    /// Generate the initial pattern and reason stores.
    Bootstrap {
        /// Print rendered prompts instead of generating.
        #[arg(long)]
        dry_run: bool,
        /// Users covered by `--dry-run`.
        #[arg(long, default_value_t = 3)]
        limit: usize,
    },
    /// Train the reward model on the bootstrap stores.
    TrainRm {
        /// Train the variant without pattern/reason matching.
        #[arg(long)]
        sequence_only: bool,
    },
    /// Correct the stores chronologically with the frozen reward model.
    Correct {
        /// Continue from the last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Full-ranking Recall@K and NDCG@K on the test split.
    Eval(ModelArgs),
    /// Inference time per scored user.
    Bench(ModelArgs),
    /// Attention weights and texts for one user/item pair.
    ExportCase {
        #[arg(long)]
        user: String,
        #[arg(long)]
        item: String,
        #[arg(long, value_enum, default_value_t = Stores::Corrected)]
        stores: Stores,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Stores::Corrected)]
    stores: Stores,
    #[arg(long)]
    sequence_only: bool,
}

impl ModelArgs {
    fn variant(&self) -> Variant {
        if self.sequence_only {
            Variant::SequenceOnly
        } else {
            Variant::Full
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Stores {
    Bootstrap,
    Corrected,
}

impl From<Stores> for StoreChoice {
    fn from(s: Stores) -> Self {
        match s {
            Stores::Bootstrap => StoreChoice::Bootstrap,
            Stores::Corrected => StoreChoice::Corrected,
        }
    }
}

fn print_json(value: &impl Serialize) -> reasonrec::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(cli: &Cli) -> reasonrec::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if cli.threads == Some(0) {
        return Err(Error::Config("--threads must be positive".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> reasonrec::Result<()> {
    let cfg = load_config(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Prepare => {
            let split = pipeline::prepare(&cfg)?;
            print_json(&split.stats)
        }
        Command::Pretrain => {
            let log = pipeline::pretrain(&cfg)?;
            let tail = &log[log.len().saturating_sub(50)..];
            let mean = tail.iter().map(|s| s.mean_reward).sum::<f64>() / tail.len().max(1) as f64;
            println!("pretrained for {} steps; mean group reward over the last {}: {mean:.4}", log.len(), tail.len());
            Ok(())
        }
        Command::Bootstrap { dry_run: true, limit } => {
            for prompt in pipeline::dry_run_prompts(&cfg, *limit)? {
                println!("{prompt}\n---");
            }
            Ok(())
        }
        Command::Bootstrap { dry_run: false, .. } => print_json(&pipeline::bootstrap(&cfg)?),
        Command::TrainRm { sequence_only } => {
            let v = if *sequence_only { Variant::SequenceOnly } else { Variant::Full };
            let report = pipeline::train_rm(&cfg, v)?;
            print_json(&report.epoch_losses)
        }
        Command::Correct { resume } => {
            let state = pipeline::correct(&cfg, *resume)?;
            println!("correction at step {} of the schedule", state.cursor);
            Ok(())
        }
        Command::Eval(a) => {
            let report = pipeline::evaluate(&cfg, a.variant(), a.stores.into())?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Bench(a) => print_json(&pipeline::bench(&cfg, a.variant(), a.stores.into())?),
        Command::ExportCase { user, item, stores } => {
            let dir = pipeline::export_case(&cfg, user, item, (*stores).into())?;
            println!("{}", dir.display());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Unknown { .. } => 2,
        Error::Prerequisite { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
