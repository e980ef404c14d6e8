//! The intent-mask self-supervision: the loss rise from masking each
//! weighted intent, its softmax target, and intent attention drifting
//! toward the one intent the head depends on.
//!
//! ```text
//! cargo run --example mask_task
//! ```

use mim::harness::probes::mask_direction_run;
use mim::matcher::{mask_sweep, mask_target};

fn main() -> mim::Result<()> {
    let d = 2;
    let h_cls = [0.0, 0.0];
    // Four slots; the head reads slot 1 only.
    let intents = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0];
    let beta = [0.25; 4];
    let mut head = vec![0.0; 5 * d];
    head[2 * d + 1] = 8.0;
    let delta = mask_sweep(&h_cls, &intents, &beta, &head, -1.0, 1, false);
    println!("loss rise per masked slot: {:?}", delta.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    println!("importance target:         {:?}", mask_target(&delta).iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());

    println!("\ndecisive-slot attention under mask-loss descent:");
    for seed in 0..5 {
        let run = mask_direction_run(seed, 8, 2, 50, 0.05, 20.0, 6.0)?;
        let b = &run.decisive_beta;
        println!("  seed {seed}: {:.3} -> {:.3} -> {:.3} (monotone: {})", b[0], b[25], b[50], run.monotone());
    }
    Ok(())
}
