//! Test AUC as a function of the number of intents per side. With the
//! default benchmark configuration each model trains for about a minute.
//!
//! ```text
//! cargo run --release --example sweep_intents [config.toml] [seeds]
//! ```

use mim::harness::{load_or_generate, sweep_csv, sweep_intents, RunConfig};

fn main() -> mim::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml"))?,
    };
    let n: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let seeds: Vec<u64> = (0..n).map(|i| cfg.train.seed + i).collect();
    let corpus = load_or_generate(&cfg)?;
    let rows = sweep_intents(&cfg, &[1, 2, 3, 4, 5, 6], &corpus, &seeds)?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
