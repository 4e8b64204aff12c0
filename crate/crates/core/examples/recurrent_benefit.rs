//! Trains a per-slice and a recurrent Unet on decoy phantoms with identical
//! budgets and compares their test Dice. Only the recurrent model can tell
//! the object from its look-alike decoy, by following it across slices.
//!
//! cargo run --release --example recurrent_benefit [seeds]

use std::time::Instant;

use rseg::bench::{compare_recurrence, BenchSettings};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut settings = BenchSettings::default();
    if let Some(n) = std::env::args().nth(1) {
        settings.seeds = (0..n.parse()?).collect();
    }
    let start = Instant::now();
    let report = compare_recurrence(&settings, |line| {
        println!("[{:6.1}s] {line}", start.elapsed().as_secs_f64());
    })?;
    println!("per-slice  mean test dice {:.4}", report.mean_per_slice());
    println!("recurrent  mean test dice {:.4}", report.mean_recurrent());
    println!("margin {:+.4}", report.margin());
    Ok(())
}
