//! Finite-difference check of every differentiable op and the training
//! loss, plus a deliberately wrong backward that must be caught.

use scaleflow::cli::format_check;
use scaleflow::gradcheck::{corrupted_fixture, run_all, run_op};

fn main() -> scaleflow::Result<()> {
    for r in run_all()? {
        println!("{}", format_check(&r));
    }
    println!("{}", format_check(&run_op(&corrupted_fixture(), 0)?));
    Ok(())
}
