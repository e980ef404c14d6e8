use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mim::data::generate_corpus;
use mim::harness::{
    ablate, ablation_csv, ablation_table, evaluate, grad_check_suite, load_or_generate, summary, sweep_csv,
    sweep_intents, train, write_corpus, MetricsReport, RunConfig,
};
use mim::model::AblationFlags;
use mim::tensor::{load_checkpoint, ParamSet};
use mim::{Error, Result};

#[derive(Parser)]
#[command(name = "mim", about = "Multi-intent attribute-aware text matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for every output file.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus as train/valid/test JSON lines.
    GenData(Common),
    /// Train and keep the best validation checkpoint.
    Train(Common),
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
        split: String,
        /// Overrides `train.eval_threshold`.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train the full model and one variant per removed mechanism.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of no_gate,no_kl,no_dis,no_multi_intent,no_mask.
        #[arg(long, value_delimiter = ',', default_values_t = AblationFlags::NAMES.map(String::from))]
        flags: Vec<String>,
        /// Number of consecutive seeds starting at the configured seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Train one model per intent count.
    SweepIntents {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5, 6])]
        c: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Finite-difference check of every loss component and op.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 8)]
        per_param: usize,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(&c.config)?;
    let cfg = match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    fs::create_dir_all(&c.out)?;
    Ok(cfg)
}

fn seed_list(cfg: &RunConfig, n: u64) -> Vec<u64> {
    (0..n.max(1)).map(|i| cfg.train.seed + i).collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let corpus = generate_corpus(&cfg.corpus)?;
            for path in write_corpus(&cfg, &corpus, &c.out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let corpus = load_or_generate(&cfg)?;
            let outcome = train(&cfg, &corpus, Some(&c.out))?;
            print!("{}", summary(&cfg.model(), outcome.num_params, outcome.best_epoch, &outcome.test));
            println!("wrote {}", c.out.display());
        }
        Command::Eval { common, checkpoint, split, threshold } => {
            let cfg = load_config(&common)?;
            let path = checkpoint.unwrap_or_else(|| common.out.join("best.ckpt"));
            let params: ParamSet<f32> = load_checkpoint(&path)
                .map_err(|e| Error::Config(format!("cannot load checkpoint {}: {e}", path.display())))?;
            let corpus = load_or_generate(&cfg)?;
            let examples = match split.as_str() {
                "train" => &corpus.train,
                "valid" => &corpus.valid,
                _ => &corpus.test,
            };
            let report = evaluate(&params, &cfg.model(), examples, threshold.unwrap_or(cfg.train.eval_threshold))?;
            let csv = format!("split,{}\n{split},{}\n", MetricsReport::CSV_HEADER, report.csv_row());
            print!("{csv}");
            write(&common.out.join(format!("eval_{split}.csv")), &csv)?;
        }
        Command::Ablate { common, flags, seeds } => {
            let cfg = load_config(&common)?;
            let corpus = load_or_generate(&cfg)?;
            let rows = ablate(&cfg, &flags, &corpus, &seed_list(&cfg, seeds))?;
            let table = ablation_table(&rows);
            print!("{table}");
            write(&common.out.join("ablation.csv"), &ablation_csv(&rows))?;
            write(&common.out.join("ablation.txt"), &table)?;
        }
        Command::SweepIntents { common, c, seeds } => {
            let cfg = load_config(&common)?;
            let corpus = load_or_generate(&cfg)?;
            let rows = sweep_intents(&cfg, &c, &corpus, &seed_list(&cfg, seeds))?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            write(&common.out.join("sweep_intents.csv"), &csv)?;
        }
        Command::GradCheck { common, per_param } => {
            let cfg = load_config(&common)?;
            let suite = grad_check_suite(cfg.train.seed, per_param)?;
            let text = suite.render();
            print!("{text}");
            write(&common.out.join("grad_check.txt"), &text)?;
            if !suite.passed() {
                return Err(Error::Numerical("gradient check exceeded its tolerance".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
