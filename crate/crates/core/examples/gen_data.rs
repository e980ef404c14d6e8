//! Generates the synthetic matching corpus, prints a few pairs with their
//! planted intents, and scores the rule oracles that bound what a learned
//! matcher can reach.
//!
//! ```text
//! cargo run --release --example gen_data [out_dir]
//! ```

use mim::data::{build_vocab, generate_corpus, oracle_predict, oracle_scores, AttributedText, CorpusSpec, OracleEvidence, Vocab};
use mim::harness::{accuracy, auc, write_corpus, RunConfig};

fn show(side: &AttributedText, vocab: &Vocab) -> String {
    let words = |ids: &[usize]| ids.iter().map(|&t| vocab.token(t)).collect::<Vec<_>>().join(" ");
    let attrs: Vec<String> = side.attributes.iter().map(|a| format!("{}={}", a.attr_type, words(&a.tokens))).collect();
    format!("\"{}\" [{}]", words(&side.tokens), attrs.join(", "))
}

fn main() -> mim::Result<()> {
    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec)?;
    let vocab = build_vocab(&spec);
    println!("vocabulary {} tokens, {} latent intents", vocab.len(), spec.num_latent_intents);
    for (name, split) in corpus.splits() {
        let pos = split.iter().filter(|e| e.label == 1).count();
        println!("{name:<5} {:>5} pairs, {:.1}% positive", split.len(), 100.0 * pos as f64 / split.len() as f64);
    }
    for e in corpus.train.iter().take(3) {
        println!("\nlabel {} (intents {:?} vs {:?})", e.label, e.latent_x, e.latent_y);
        println!("  x: {}", show(&e.x, &vocab));
        println!("  y: {}", show(&e.y, &vocab));
    }

    let labels: Vec<u8> = corpus.test.iter().map(|e| e.label).collect();
    println!();
    for evidence in [OracleEvidence::Attributes, OracleEvidence::TextAndAttributes] {
        let scores = oracle_scores(&spec, &corpus.test, evidence);
        let hard: Vec<f64> = corpus.test.iter().map(|e| f64::from(oracle_predict(&spec, e, evidence))).collect();
        println!(
            "oracle {evidence:?}: test AUC {:.4}, accuracy {:.4}",
            auc(&scores, &labels).unwrap_or(f64::NAN),
            accuracy(&hard, &labels, 0.5)
        );
    }

    if let Some(dir) = std::env::args().nth(1) {
        let cfg = RunConfig { corpus: spec, ..Default::default() };
        for path in write_corpus(&cfg, &corpus, dir.as_ref())? {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
