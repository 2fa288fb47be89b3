//! Timing grid over tokens, width and depth with fitted exponents.
//!
//! `cargo run --release --example bench_scaling`

use scaleflow::bench::{run, BenchGrid};

fn main() -> scaleflow::Result<()> {
    let report = run(&BenchGrid::default())?;
    print!("{}", report.cells_csv());
    for s in &report.skipped {
        println!("skipped {s}");
    }
    print!("{}", report.fits_csv());
    Ok(())
}
