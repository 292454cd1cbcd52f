use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use umre::commands;
use umre::config::Config;
use umre::Result;

#[derive(Parser)]
#[command(name = "umre", version, about = "Multi-objective ranking ensemble with monotone score transforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dataset file, overriding `data.path`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file; defaults to `checkpoint.json` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Train the ranking model and the learned baselines.
    Train(WithCheckpoint),
    /// Evaluate the model and baselines on the test split.
    Eval(WithCheckpoint),
    /// Write learned transform curves as CSV.
    DumpTransform(WithCheckpoint),
    /// Re-emit the reward-weight trace from a training log.
    ParetoTrace {
        /// Training log; defaults to `train_log.jsonl` in the output directory.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = load_config(&c)?;
            let s = commands::synth(&cfg, &c.out, c.data.as_deref())?;
            println!("wrote {} records to {}", s.records, s.path.display());
            for (name, rate) in cfg.data.tasks.iter().zip(&s.rates) {
                println!("{name:>12}  positive rate {rate:.4}");
            }
        }
        Command::Train(w) => {
            let cfg = load_config(&w.common)?;
            let out = &w.common.out;
            let t = commands::train(&cfg, out, w.common.data.as_deref(), w.checkpoint.as_deref())?;
            for e in &t.report.epochs {
                println!(
                    "epoch {:>3}  loss {:.6}  min uauc {:.4}{}",
                    e.epoch,
                    e.train_loss,
                    e.valid_uauc.iter().copied().fold(f64::INFINITY, f64::min),
                    if e.pareto_applied { "  weights updated" } else { "" }
                );
            }
            println!("checkpoint written to {}", t.checkpoint.display());
        }
        Command::Eval(w) => {
            let cfg = load_config(&w.common)?;
            let e = commands::eval(&cfg, &w.common.out, w.common.data.as_deref(), w.checkpoint.as_deref())?;
            print!("{}", e.text);
        }
        Command::DumpTransform(w) => {
            let cfg = load_config(&w.common)?;
            let p = commands::dump_transform(&cfg, &w.common.out, w.common.data.as_deref(), w.checkpoint.as_deref())?;
            println!("curves written to {}", p.display());
        }
        Command::ParetoTrace { log, out } => {
            let log = log.unwrap_or_else(|| out.join(commands::TRAIN_LOG_FILE));
            let (_, csv) = commands::pareto_trace(Path::new(&log), &out)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
