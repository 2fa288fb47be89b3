//! Train the toy configuration and report the loss drop.
//!
//! `cargo run --release --example train_toy -- [steps]`

use scaleflow::train::{TrainConfig, Trainer};

fn main() -> scaleflow::Result<()> {
    let steps = std::env::args().nth(1).map(|s| s.parse().expect("steps")).unwrap_or(400);
    let cfg = TrainConfig { steps, ..TrainConfig::toy() };
    let mut trainer = Trainer::new(cfg)?;
    let mut curve = Vec::with_capacity(steps);
    trainer.run(|r| {
        if r.step % 50 == 0 {
            println!("step {:>5}  loss {:.4}", r.step, r.total);
        }
        curve.push(r.total);
        Ok(())
    })?;
    let w = (steps / 20).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    println!(
        "mean of first {w}: {:.4}, last {w}: {:.4}",
        mean(&curve[..w]),
        mean(&curve[curve.len() - w..])
    );
    Ok(())
}
