//! Scale pyramid: block-average downsampling, the multi-scale tokenizer and
//! bicubic upsampling.
//!
//! Both resampling operators are linear maps over the spatial grid applied
//! independently per channel, so they share one sparse representation,
//! [`SpatialMap`], which the tape can also differentiate through.

use crate::tensor::{Matrix, Result, Tensor, TensorError};

/// Sparse linear map from an `in_h x in_w` grid to an `out_h x out_w` grid.
/// Row `o` of the map lists `(input position, weight)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    rows: Vec<Vec<(usize, f64)>>,
}

impl SpatialMap {
    pub fn input_dims(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn output_dims(&self) -> (usize, usize) {
        self.out_hw
    }

    /// Apply to an `(in_h*in_w) x c` matrix.
    pub fn apply_matrix(&self, x: &Matrix) -> Result<Matrix> {
        let n_in = self.in_hw.0 * self.in_hw.1;
        if x.rows() != n_in {
            return Err(TensorError::Invalid {
                op: "spatial_map",
                msg: format!("expected {n_in} spatial rows, got {}", x.rows()),
            });
        }
        let c = x.cols();
        let mut out = Matrix::zeros(self.rows.len(), c);
        let od = out.data_mut();
        for (o, taps) in self.rows.iter().enumerate() {
            let orow = &mut od[o * c..(o + 1) * c];
            for &(src, wgt) in taps {
                for (v, s) in orow.iter_mut().zip(x.row(src)) {
                    *v += wgt * s;
                }
            }
        }
        Ok(out)
    }

    /// Apply the transposed map to an `(out_h*out_w) x c` matrix.
    pub fn apply_transpose_matrix(&self, y: &Matrix) -> Result<Matrix> {
        if y.rows() != self.rows.len() {
            return Err(TensorError::Invalid {
                op: "spatial_map_transpose",
                msg: format!("expected {} spatial rows, got {}", self.rows.len(), y.rows()),
            });
        }
        let c = y.cols();
        let mut out = Matrix::zeros(self.in_hw.0 * self.in_hw.1, c);
        let od = out.data_mut();
        for (o, taps) in self.rows.iter().enumerate() {
            let grow = y.row(o);
            for &(src, wgt) in taps {
                for (v, g) in od[src * c..(src + 1) * c].iter_mut().zip(grow) {
                    *v += wgt * g;
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if (x.height(), x.width()) != self.in_hw {
            return Err(TensorError::Invalid {
                op: "spatial_map",
                msg: format!("expected {:?} grid, got {}x{}", self.in_hw, x.height(), x.width()),
            });
        }
        let y = self.apply_matrix(&x.reshape_to_matrix())?;
        Tensor::reshape_to_tensor(y, self.out_hw.0, self.out_hw.1)
    }

    /// Block averaging over `r x r` cells.
    pub fn block_average(h: usize, w: usize, r: usize) -> Result<Self> {
        if r == 0 || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
            return Err(TensorError::Invalid {
                op: "downsample",
                msg: format!("factor {r} does not divide {h}x{w}"),
            });
        }
        let (oh, ow) = (h / r, w / r);
        let wgt = 1.0 / (r * r) as f64;
        let mut rows = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                let mut taps = Vec::with_capacity(r * r);
                for di in 0..r {
                    for dj in 0..r {
                        taps.push(((i * r + di) * w + j * r + dj, wgt));
                    }
                }
                rows.push(taps);
            }
        }
        Ok(Self {
            in_hw: (h, w),
            out_hw: (oh, ow),
            rows,
        })
    }

    /// Bicubic upsampling by integer factor `r`. Output pixel `i` sits at
    /// source coordinate `i / r`; its taps are the four source pixels
    /// `floor(i/r) + s`, `s in -1..=2`, weighted by `keys_kernel(s - frac)`,
    /// with out-of-range indices clamped to the border.
    pub fn bicubic(h: usize, w: usize, r: usize) -> Result<Self> {
        if r == 0 {
            return Err(TensorError::Invalid {
                op: "upsample",
                msg: "factor must be at least 1".into(),
            });
        }
        let axis = |n: usize| -> Vec<Vec<(usize, f64)>> {
            (0..n * r)
                .map(|o| {
                    let base = (o / r) as isize;
                    let frac = (o % r) as f64 / r as f64;
                    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
                    for s in -1isize..=2 {
                        let wgt = keys_kernel(s as f64 - frac);
                        if wgt == 0.0 {
                            continue;
                        }
                        let src = (base + s).clamp(0, n as isize - 1) as usize;
                        match taps.iter_mut().find(|(k, _)| *k == src) {
                            Some(t) => t.1 += wgt,
                            None => taps.push((src, wgt)),
                        }
                    }
                    taps
                })
                .collect()
        };
        let (ti, tj) = (axis(h), axis(w));
        let mut rows = Vec::with_capacity(h * r * w * r);
        for ri in &ti {
            for rj in &tj {
                let mut taps = Vec::with_capacity(ri.len() * rj.len());
                for &(si, wi) in ri {
                    for &(sj, wj) in rj {
                        taps.push((si * w + sj, wi * wj));
                    }
                }
                rows.push(taps);
            }
        }
        Ok(Self {
            in_hw: (h, w),
            out_hw: (h * r, w * r),
            rows,
        })
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn keys_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

pub fn downsample(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 1 {
        let mut y = x.clone();
        y.requires_grad = false;
        y.grad = None;
        return Ok(y);
    }
    SpatialMap::block_average(x.height(), x.width(), r)?.apply(x)
}

pub fn upsample_bicubic(x: &Tensor, r: usize) -> Result<Tensor> {
    SpatialMap::bicubic(x.height(), x.width(), r)?.apply(x)
}

/// Number of scales and base factor; scale `i` (0-based) is downsampled by
/// `base^(scales - 1 - i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidConfig {
    pub scales: usize,
    pub base: usize,
}

impl PyramidConfig {
    pub fn new(scales: usize, base: usize) -> Result<Self> {
        if scales == 0 || base == 0 {
            return Err(TensorError::Invalid {
                op: "pyramid",
                msg: format!("need scales >= 1 and base >= 1, got {scales}, {base}"),
            });
        }
        Ok(Self { scales, base })
    }

    pub fn factor(&self, scale: usize) -> usize {
        self.base.pow((self.scales - 1 - scale) as u32)
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let r = self.factor(0);
        if !h.is_multiple_of(r) || !w.is_multiple_of(r) {
            return Err(TensorError::Invalid {
                op: "pyramid",
                msg: format!("{h}x{w} is not divisible by the coarsest factor {r}"),
            });
        }
        Ok(())
    }

    /// Spatial size of scale `scale` for a root of `h x w`.
    pub fn dims(&self, scale: usize, h: usize, w: usize) -> (usize, usize) {
        let r = self.factor(scale);
        (h / r, w / r)
    }

    pub fn tokens(&self, scale: usize, h: usize, w: usize) -> usize {
        let (a, b) = self.dims(scale, h, w);
        a * b
    }

    /// Transformer sequence length at `scale`: the class embedding at the
    /// coarsest size plus one upsampled map per earlier scale.
    pub fn prefix_tokens(&self, scale: usize, h: usize, w: usize) -> usize {
        (0..=scale).map(|j| self.tokens(j, h, w)).sum()
    }
}

/// Token maps from coarsest to finest.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPyramid {
    pub maps: Vec<Tensor>,
}

pub fn tokenize(x: &Tensor, cfg: &PyramidConfig) -> Result<TokenPyramid> {
    cfg.check_dims(x.height(), x.width())?;
    let maps = (0..cfg.scales)
        .map(|i| downsample(x, cfg.factor(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenPyramid { maps })
}
