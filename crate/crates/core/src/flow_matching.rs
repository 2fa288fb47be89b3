//! Adaptive flow-matching block and the first/second-order heads.
//!
//! A block modulates the state with six per-token tensors derived from the
//! condition plus the scalar timestep:
//!
//! ```text
//! a1, a2, b1, b2, g1, g2 = split6(mlp(cond + t))
//! f'  = attn(g1 * ln(f)  + b1) * a1
//! f'' = mlp(g2 * ln(f') + b2) * a2
//! ```

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, TensorError};
use crate::transformer::{attention, affine, AffineVars, AttnVars};

/// Guard added to the standard deviation in layer norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LnEps(f64);

impl LnEps {
    pub const DEFAULT: LnEps = LnEps(1e-5);

    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("epsilon must be positive, got {eps}"),
            });
        }
        Ok(Self(eps))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for LnEps {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Which time derivative a head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Order {
    First,
    Second,
}

impl Order {
    pub fn name(self) -> &'static str {
        match self {
            Order::First => "first",
            Order::Second => "second",
        }
    }
}

impl std::str::FromStr for Order {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "first" => Ok(Order::First),
            "second" => Ok(Order::Second),
            other => Err(format!("unknown order {other:?}, expected first|second")),
        }
    }
}

/// Chunk order of the `6 * width` modulation output.
pub const MODULATION_ORDER: [&str; 6] = ["alpha1", "alpha2", "beta1", "beta2", "gamma1", "gamma2"];

#[derive(Debug, Clone, Copy)]
pub struct FmBlockVars {
    /// `width -> 6 * width`.
    pub modulation: AffineVars,
    pub attn: AttnVars,
    /// `width -> width`.
    pub out: AffineVars,
}

#[derive(Debug, Clone)]
pub struct FmHeadVars {
    pub order: Order,
    /// Data channels to model width.
    pub lift: AffineVars,
    pub blocks: Vec<FmBlockVars>,
    /// Model width back to data channels.
    pub proj: AffineVars,
}

pub fn layer_norm(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    tape.layer_norm_rows(x, eps)
}

/// Row-wise affine map.
pub fn mlp(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    if tape.shape(x).1 != tape.shape(w).0 {
        return Err(TensorError::ShapeMismatch {
            op: "mlp",
            left: tape.shape(x),
            right: tape.shape(w),
        });
    }
    affine(tape, x, &AffineVars { w, b })
}

pub fn fm_block(tape: &mut Tape, cond: Var, state: Var, t: f64, w: &FmBlockVars, eps: f64) -> Result<Var> {
    let (n, width) = tape.shape(state);
    if tape.shape(cond) != (n, width) {
        return Err(TensorError::ShapeMismatch {
            op: "fm_block",
            left: tape.shape(cond),
            right: tape.shape(state),
        });
    }
    let shifted = tape.add_scalar(cond, t)?;
    let m = mlp(tape, shifted, w.modulation.w, w.modulation.b)?;
    if tape.shape(m).1 != 6 * width {
        return Err(TensorError::Invalid {
            op: "fm_block",
            msg: format!("modulation width {} is not 6 x {width}", tape.shape(m).1),
        });
    }
    let mut chunks = [m; 6];
    for (k, c) in chunks.iter_mut().enumerate() {
        *c = tape.slice_cols(m, k * width, width)?;
    }
    let [a1, a2, b1, b2, g1, g2] = chunks;

    let h = layer_norm(tape, state, eps)?;
    let h = tape.hadamard(g1, h)?;
    let h = tape.add(h, b1)?;
    let h = attention(tape, h, &w.attn)?;
    let f1 = tape.hadamard(h, a1)?;

    let h = layer_norm(tape, f1, eps)?;
    let h = tape.hadamard(g2, h)?;
    let h = tape.add(h, b2)?;
    let h = mlp(tape, h, w.out.w, w.out.b)?;
    tape.hadamard(h, a2)
}

/// Apply the head's blocks in sequence at model width. Zero blocks is the
/// identity on `state`.
pub fn head_forward(tape: &mut Tape, head: &FmHeadVars, cond: Var, state: Var, t: f64, eps: f64) -> Result<Var> {
    head.blocks
        .iter()
        .try_fold(state, |s, b| fm_block(tape, cond, s, t, b, eps))
}

/// Full head: lift the data-channel state, run the blocks, project back.
pub fn head_predict(tape: &mut Tape, head: &FmHeadVars, cond: Var, state: Var, t: f64, eps: f64) -> Result<Var> {
    let lifted = affine(tape, state, &head.lift)?;
    let h = head_forward(tape, head, cond, lifted, t, eps)?;
    affine(tape, h, &head.proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn layer_norm_hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap()).unwrap();
        let y = layer_norm(&mut tape, x, 0.0).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        let want = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((want[2] - 1.224_744_871_391_589).abs() < 1e-12);
    }

    #[test]
    fn mlp_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_fn(4, 3, |i, j| (i + j) as f64)).unwrap();
        let id = tape.constant(Matrix::identity(3)).unwrap();
        let zb = tape.constant(Matrix::zeros(1, 3)).unwrap();
        let y = mlp(&mut tape, x, id, zb).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zero = tape.constant(Matrix::zeros(4, 3)).unwrap();
        let w = tape.constant(Matrix::filled(3, 5, 0.3)).unwrap();
        let b = tape.constant(Matrix::from_fn(1, 5, |_, j| j as f64)).unwrap();
        let y = mlp(&mut tape, zero, w, b).unwrap();
        for i in 0..4 {
            assert_eq!(tape.value(y).row(i), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        }
        assert!(mlp(&mut tape, x, b, b).is_err());
    }

    #[test]
    fn ln_eps_must_be_positive() {
        assert!(LnEps::new(0.0).is_err());
        assert!(LnEps::new(-1.0).is_err());
        assert_eq!(LnEps::default().get(), 1e-5);
    }

    #[test]
    fn order_parses() {
        assert_eq!("first".parse::<Order>().unwrap(), Order::First);
        assert_eq!("second".parse::<Order>().unwrap(), Order::Second);
        assert!("third".parse::<Order>().is_err());
    }
}
