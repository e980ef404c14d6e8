//! Trains the full model and one variant per removed mechanism on a shared
//! corpus and prints the comparison table. The default, `configs/desk.toml`
//! with one seed, trains six models for about a minute each.
//!
//! ```text
//! cargo run --release --example ablation [config.toml] [seeds]
//! ```

use mim::harness::{ablate, ablation_table, load_or_generate, RunConfig};
use mim::model::AblationFlags;

fn main() -> mim::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml"))?,
    };
    let n: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let seeds: Vec<u64> = (0..n).map(|i| cfg.train.seed + i).collect();
    let corpus = load_or_generate(&cfg)?;
    let flags: Vec<String> = AblationFlags::NAMES.iter().map(|s| s.to_string()).collect();
    let rows = ablate(&cfg, &flags, &corpus, &seeds)?;
    print!("{}", ablation_table(&rows));
    for r in &rows {
        println!("{:<16} {} parameters", r.label, r.runs.num_params);
    }
    Ok(())
}
