use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hcsa::bench::summary_table;
use hcsa::commands::{self, CommandError, OracleKind, RunConfig};

/// Hierarchical convolutional self-attention video QA.
///
/// Log verbosity comes from the LOG_LEVEL environment variable
/// (error, warn, info, debug, trace; default info).
#[derive(Parser)]
#[command(name = "hcsa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/ and eval/ datasets.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to data_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on data_dir/train and write a checkpoint and loss report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to out_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write greedy answers for a dataset as JSON lines.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions with BLEU-1 and WUPS.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// Answers file (JSON lines) or dataset directory.
        #[arg(long)]
        references: PathBuf,
        #[arg(long, value_enum, default_value_t = Oracle::Exact)]
        oracle: Oracle,
        /// Taxonomy file (term<TAB>parent) for the taxonomy oracle.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Synonym file (a<TAB>b) for the synonyms oracle.
        #[arg(long)]
        synonyms: Option<PathBuf>,
        /// Report only this WUPS threshold.
        #[arg(long, value_enum)]
        gamma: Option<Gamma>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the HCSA encoder against a parameter-matched GRU encoder.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// CSV destination (defaults to out_dir/bench.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Oracle {
    Exact,
    Synonyms,
    Taxonomy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gamma {
    #[value(name = "0.0")]
    Zero,
    #[value(name = "0.9")]
    PointNine,
}

fn load(config: &Path, seed: Option<u64>) -> Result<RunConfig, CommandError> {
    let cfg = RunConfig::load(config)?.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let dir = commands::cmd_gen_data(&cfg, out.as_deref())?;
            println!(
                "wrote {} training and {} evaluation samples to {}",
                cfg.train_samples,
                cfg.eval_samples,
                dir.display()
            );
        }
        Command::Train { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let (ckpt, report) = commands::cmd_train(&cfg, out.as_deref())?;
            println!(
                "trained {} steps, final epoch loss {:.6}",
                ckpt.step,
                report.final_loss().unwrap_or(f64::NAN)
            );
        }
        Command::Infer {
            checkpoint,
            dataset,
            out,
        } => {
            let records = commands::cmd_infer(&checkpoint, &dataset, &out)?;
            println!("wrote {} predictions to {}", records.len(), out.display());
        }
        Command::Eval {
            predictions,
            references,
            oracle,
            taxonomy,
            synonyms,
            gamma,
            out,
        } => {
            let (kind, file) = match oracle {
                Oracle::Exact => (OracleKind::Exact, None),
                Oracle::Synonyms => (OracleKind::Synonyms, synonyms.as_deref()),
                Oracle::Taxonomy => (OracleKind::Taxonomy, taxonomy.as_deref()),
            };
            let oracle = commands::build_oracle(kind, file)?;
            let report = commands::cmd_eval(&predictions, &references, &oracle, out.as_deref())?;
            let wups = |s: &hcsa::metrics::Scores| match gamma {
                Some(Gamma::Zero) => format!("WUPS@0.0 {:.4}", s.wups_0),
                Some(Gamma::PointNine) => format!("WUPS@0.9 {:.4}", s.wups_09),
                None => format!("WUPS@0.0 {:.4}  WUPS@0.9 {:.4}", s.wups_0, s.wups_09),
            };
            let o = &report.overall;
            println!("samples   {}", o.count);
            println!("BLEU-1    {:.4}", o.bleu1);
            if gamma.is_none_or(|g| matches!(g, Gamma::Zero)) {
                println!("WUPS@0.0  {:.4}", o.wups_0);
            }
            if gamma.is_none_or(|g| matches!(g, Gamma::PointNine)) {
                println!("WUPS@0.9  {:.4}", o.wups_09);
            }
            for (tag, s) in &report.by_type {
                println!("  {tag:<10} n={:<6} BLEU-1 {:.4}  {}", s.count, s.bleu1, wups(s));
            }
        }
        Command::Bench { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("bench.csv"));
            let results = commands::cmd_bench(&cfg, &out)?;
            print!("{}", summary_table(&results));
            println!("csv written to {}", out.display());
        }
        Command::Gradcheck { config, eps, seed } => {
            let cfg = load(&config, seed)?;
            let report = commands::cmd_gradcheck(&cfg, eps)?;
            println!(
                "max relative error {:.3e} over {} entries (worst {}[{}])",
                report.max_relative_error, report.checked, report.worst_parameter, report.worst_index
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LOG_LEVEL", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
