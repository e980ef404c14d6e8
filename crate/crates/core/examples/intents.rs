//! Multi-intent extraction on a hand-built side: aggregation weights over
//! attributes, the distribution loss that spreads intents apart, and the
//! KL alignment between two sides.
//!
//! ```text
//! cargo run --example intents
//! ```

use mim::harness::probes::{dis_spread_run, SpreadTarget};
use mim::intents::{distribution_loss, extract_intents, intent_distribution, kl_loss};
use mim::tensor::Graph;

fn rows(v: &[f64], width: usize) -> String {
    v.chunks(width).map(|r| format!("[{}]", r.iter().map(|x| format!("{x:+.3}")).collect::<Vec<_>>().join(" "))).collect::<Vec<_>>().join(" ")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (d, n, c) = (4, 3, 2);
    let mut g = Graph::<f64>::new();
    let h_text = g.constant(vec![d], vec![0.5, 0.5, 0.0, 0.0])?;
    // Three attribute states: two along the text, one orthogonal.
    let attrs = g.constant(vec![n, d], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0])?;
    // Intent 0 prefers the first attribute, intent 1 the third.
    let mut w = vec![0.0; 2 * d * c];
    w[(d) * c] = 3.0;
    w[(d + 2) * c + 1] = 3.0;
    let w_a = g.constant(vec![2 * d, c], w)?;
    let b_a = g.constant(vec![c], vec![0.0; c])?;
    let set = extract_intents(&mut g, h_text, Some(attrs), w_a, b_a)?;
    let weights = g.value(set.weights.unwrap()).to_vec();
    println!("aggregation weights [attribute × intent]: {}", rows(&weights, c));
    println!("intents: {}", rows(g.value(set.intents), d));

    let dis = distribution_loss(&mut g, &set, h_text, 0.5, false)?.unwrap();
    println!("distribution loss (tau 0.5): {:.4}", g.value(dis)[0]);

    let p = intent_distribution(&mut g, set.intents)?;
    let other = g.constant(vec![c, d], vec![0.0, 0.0, 2.0, 0.0, 2.0, 0.0, 0.0, 0.0])?;
    let q = intent_distribution(&mut g, other)?;
    for label in [1, 0] {
        let kl = kl_loss(&mut g, p, q, label, 1.0, 1e-8)?;
        println!("KL term against a different side, label {label}: {:.4}", g.value(kl)[0]);
    }
    let same = kl_loss(&mut g, p, p, 1, 1.0, 1e-8)?;
    println!("KL term against itself: {}", g.value(same)[0]);

    println!("\n50 Adam steps on the distribution loss from collapsed intents:");
    for seed in 0..5 {
        let run = dis_spread_run(SpreadTarget::Intents, seed, 16, 4, 3, 50, 1e-3, 0.5)?;
        println!("  seed {seed}: mean pairwise distance {:.5} -> {:.5}", run.distance_before, run.distance_after);
    }
    Ok(())
}
