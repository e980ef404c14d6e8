//! Trains on the synthetic corpus, keeps the best validation checkpoint,
//! reloads it from disk and evaluates the test split.
//!
//! ```text
//! cargo run --release --example train_and_eval [config.toml] [out_dir]
//! ```
//!
//! Without arguments it runs `configs/desk.toml`, about a minute in release
//! mode on one core.

use std::path::PathBuf;

use mim::harness::{evaluate, load_or_generate, summary, train, RunConfig};
use mim::tensor::{load_checkpoint, ParamSet};

fn main() -> mim::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml"))?,
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/train_and_eval".into()));
    let corpus = load_or_generate(&cfg)?;
    let outcome = train(&cfg, &corpus, Some(&out))?;
    for e in &outcome.epochs {
        println!(
            "epoch {:>2}  train loss {:.4} (match {:.4})  valid AUC {:.4}",
            e.epoch,
            e.train.total,
            e.train.match_loss,
            e.valid.auc_or_nan()
        );
    }
    print!("{}", summary(&cfg.model(), outcome.num_params, outcome.best_epoch, &outcome.test));

    let reloaded: ParamSet<f32> = load_checkpoint(outcome.checkpoint.as_ref().expect("written"))?;
    let again = evaluate(&reloaded, &cfg.model(), &corpus.test, cfg.train.eval_threshold)?;
    println!("reloaded checkpoint reproduces test metrics: {}", again == outcome.test);
    println!("artifacts in {}", out.display());
    Ok(())
}
