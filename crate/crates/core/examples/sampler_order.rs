//! Global error of the Euler and Taylor integrators against the exact
//! variance-preserving trajectory, as a function of step size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scaleflow::bench::loglog_slope;
use scaleflow::data::standard_normal;
use scaleflow::sample::{integrate, AnalyticField, TimeGrid};
use scaleflow::{Order, Schedule};

fn main() -> scaleflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let target = standard_normal(&mut rng, 4, 4, 2);
    let noise = standard_normal(&mut rng, 4, 4, 2);
    let mut field = AnalyticField { schedule: Schedule::vp(), target };
    for end in [0.9, 1.0] {
        let exact = field.exact(&noise, end)?;
        let x0 = field.exact(&noise, 0.0)?;
        println!("horizon [0, {end}]");
        for order in [Order::First, Order::Second] {
            let mut pts = Vec::new();
            for steps in [5, 10, 20, 40, 80] {
                let x = integrate(&mut field, &x0, TimeGrid { start: 0.0, end, steps }, order)?;
                let err = x.sub(&exact)?.max_abs();
                println!("  {:<6} steps {steps:>3}  error {err:.3e}", order.name());
                pts.push((end / steps as f64, err));
            }
            println!("  {} slope {:.3}", order.name(), loglog_slope(&pts).unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
