//! Next-scale autoregressive transformer.
//!
//! Scale `i` sees a single token sequence: the class embedding at the
//! coarsest size followed by every earlier scale's token map upsampled onto
//! the next scale's grid. Causality across scales comes from this
//! construction alone; there is no attention mask. The transformer output for
//! scale `i` is its trailing block of tokens.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::multiscale::{PyramidConfig, SpatialMap};
use crate::tensor::{Result, TensorError};

/// Query, key and value projections, each `width x width`.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Per-token affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct ArStackVars {
    /// Lifts data channels to the model width.
    pub embed: AffineVars,
    pub layers: Vec<(AttnVars, FfnVars)>,
}

/// Root resolution and pyramid, with the upsampling maps between
/// consecutive scales built once.
#[derive(Debug, Clone)]
pub struct ScaleGrid {
    pub pyramid: PyramidConfig,
    pub height: usize,
    pub width: usize,
    up: Vec<Rc<SpatialMap>>,
}

impl ScaleGrid {
    pub fn new(pyramid: PyramidConfig, height: usize, width: usize) -> Result<Self> {
        pyramid.check_dims(height, width)?;
        let up = (0..pyramid.scales.saturating_sub(1))
            .map(|j| {
                let (h, w) = pyramid.dims(j, height, width);
                SpatialMap::bicubic(h, w, pyramid.base).map(Rc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pyramid,
            height,
            width,
            up,
        })
    }

    pub fn scales(&self) -> usize {
        self.pyramid.scales
    }

    pub fn dims(&self, scale: usize) -> (usize, usize) {
        self.pyramid.dims(scale, self.height, self.width)
    }

    pub fn tokens(&self, scale: usize) -> usize {
        self.pyramid.tokens(scale, self.height, self.width)
    }

    pub fn prefix_tokens(&self, scale: usize) -> usize {
        self.pyramid.prefix_tokens(scale, self.height, self.width)
    }

    /// Bicubic map from scale `j` to scale `j + 1`.
    pub fn upsampler(&self, j: usize) -> Rc<SpatialMap> {
        Rc::clone(&self.up[j])
    }
}

/// `softmax_rows(X Wq (X Wk)^T) X Wv`, with no temperature.
pub fn attention(tape: &mut Tape, x: Var, w: &AttnVars) -> Result<Var> {
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let scores = tape.matmul_nt(q, k)?;
    let probs = tape.softmax_rows(scores)?;
    tape.matmul(probs, v)
}

/// Residual feed-forward: `x + relu(x W1 + b1) W2 + b2`.
pub fn ffn(tape: &mut Tape, x: Var, w: &FfnVars) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_bias(h, w.b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w.w2)?;
    let h = tape.add_bias(h, w.b2)?;
    tape.add(x, h)
}

pub fn affine(tape: &mut Tape, x: Var, a: &AffineVars) -> Result<Var> {
    let y = tape.matmul(x, a.w)?;
    tape.add_bias(y, a.b)
}

/// Sequence for scale `priors.len()`: `z_init` followed by each prior map
/// upsampled by the pyramid base, all flattened row-major and stacked along
/// the token axis. `priors[j]` must have scale `j`'s token count.
pub fn build_sequence(tape: &mut Tape, grid: &ScaleGrid, z_init: Var, priors: &[Var]) -> Result<Var> {
    if priors.len() >= grid.scales() {
        return Err(TensorError::Invalid {
            op: "build_sequence",
            msg: format!("{} prior maps for {} scales", priors.len(), grid.scales()),
        });
    }
    if tape.shape(z_init).0 != grid.tokens(0) {
        return Err(TensorError::Invalid {
            op: "build_sequence",
            msg: format!("initial embedding has {} tokens, expected {}", tape.shape(z_init).0, grid.tokens(0)),
        });
    }
    let mut parts = Vec::with_capacity(priors.len() + 1);
    parts.push(z_init);
    for (j, &p) in priors.iter().enumerate() {
        if tape.shape(p).0 != grid.tokens(j) {
            return Err(TensorError::Invalid {
                op: "build_sequence",
                msg: format!("prior map {j} has {} tokens, expected {}", tape.shape(p).0, grid.tokens(j)),
            });
        }
        parts.push(tape.spatial(p, grid.upsampler(j))?);
    }
    if parts.len() == 1 {
        return Ok(z_init);
    }
    tape.concat_rows(&parts)
}

/// Run the layer stack over the scale-`scale` sequence and return its
/// trailing `tokens(scale)` rows.
pub fn forward_scale(tape: &mut Tape, grid: &ScaleGrid, stack: &ArStackVars, seq: Var, scale: usize) -> Result<Var> {
    let n = tape.shape(seq).0;
    let expected = grid.prefix_tokens(scale);
    if n != expected {
        return Err(TensorError::Invalid {
            op: "forward_scale",
            msg: format!("sequence has {n} tokens, scale {scale} expects {expected}"),
        });
    }
    let mut x = seq;
    for (attn, ff) in &stack.layers {
        x = attention(tape, x, attn)?;
        x = ffn(tape, x, ff)?;
    }
    let last = grid.tokens(scale);
    if last == n {
        return Ok(x);
    }
    tape.slice_rows(x, n - last, last)
}
