//! Central finite differences against the tape for every op and for each
//! tiny backbone, with and without the recurrent input channel.
//!
//! cargo run --release --example gradcheck

use std::time::Instant;

use rseg::gradcheck::{check_backbone, check_ops};
use rseg::model::{Backbone, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for op in check_ops(0, 1e-5)? {
        println!("{:20} max rel err {:.2e}", op.name, op.report.max_rel_error);
        worst = worst.max(op.report.max_rel_error);
    }
    for backbone in Backbone::ALL {
        for recurrent in [false, true] {
            let cfg = ModelConfig::tiny(backbone, recurrent);
            let r = check_backbone(&cfg, 0, 16, 1e-5, 24)?;
            println!(
                "{backbone:8} recurrent={recurrent:5} max rel err {:.2e} over {} elements ({} at kinks skipped)",
                r.max_rel_error, r.checked, r.skipped
            );
            worst = worst.max(r.max_rel_error);
        }
    }
    println!("worst {worst:.2e} in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
