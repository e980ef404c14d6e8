//! Finite-difference audit of every loss component and the ops beneath them.
//!
//! ```text
//! cargo run --release --example grad_check
//! ```

use std::time::Instant;

use mim::harness::grad_check_suite;

fn main() -> mim::Result<()> {
    let start = Instant::now();
    let suite = grad_check_suite(7, 8)?;
    print!("{}", suite.render());
    println!("{} in {:.1?}", if suite.passed() { "passed" } else { "FAILED" }, start.elapsed());
    Ok(())
}
