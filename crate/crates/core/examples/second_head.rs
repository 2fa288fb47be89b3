//! Fit the second-order head alone to the analytic second-derivative target.

use scaleflow::train::{SecondHeadFit, TrainConfig};

fn main() -> scaleflow::Result<()> {
    let cfg = TrainConfig::micro();
    let mut fit = SecondHeadFit::new(&cfg, &[0.1, 0.3, 0.5, 0.7, 0.9], cfg.lr)?;
    for step in 0..3000 {
        let rel = fit.step()?;
        if step % 250 == 0 {
            println!("step {step:>4}  relative sse {rel:.3e}");
        }
    }
    println!("final relative sse {:.3e}", fit.relative_sse()?);
    Ok(())
}
