//! Build a small graph on the tape and read back its gradients.

use scaleflow::{Matrix, Tape};

fn main() -> scaleflow::Result<()> {
    let mut tape = Tape::new();
    let x = tape.param(Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]])?)?;
    let w = tape.param(Matrix::from_rows(&[&[0.2], &[-0.1]])?)?;
    let y = tape.matmul(x, w)?;
    let p = tape.softmax_rows(x)?;
    let s = tape.sum_squares(y)?;
    let q = tape.sum(p)?;
    let loss = tape.add(s, q)?;
    println!("loss {}", tape.scalar(loss));
    // backward consumes the tape
    let g = tape.backward(loss)?;
    println!("dL/dx {:?}", g.get(x).map(Matrix::data));
    println!("dL/dw {:?}", g.get(w).map(Matrix::data));
    Ok(())
}
