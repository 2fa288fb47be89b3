//! Dense 64-bit tensors and matrices.
//!
//! A [`Tensor`] is an `h x w x c` array stored row-major (h, then w, then c).
//! Collapsing the two spatial axes gives an `(h*w) x c` [`Matrix`] with the
//! exact same memory layout, so the reshape in either direction is a move of
//! the backing vector and never reorders data.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLength {
        op: &'static str,
        len: usize,
        shape: (usize, usize, usize),
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("backward: loss does not depend on any trainable leaf")]
    Detached,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                op: "matrix",
                len: data.len(),
                shape: (rows, cols, 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Invalid {
                    op: "from_rows",
                    msg: "ragged rows".into(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        gemm(&self.data, &rhs.data, &mut out, n, k, m);
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, rhs.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &rhs.data[j * k..(j + 1) * k];
                out[i * m + j] = dot(arow, brow);
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (k, n, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &rhs.data[p * m..(p + 1) * m];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub(crate) fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub(crate) fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Dense `h x w x c` tensor with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(TensorError::BadLength {
                op: "tensor",
                len: data.len(),
                shape: (h, w, c),
            });
        }
        Ok(Self {
            h,
            w,
            c,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::filled(h, w, c, 0.0)
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![value; h * w * c],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for l in 0..c {
                    data.push(f(i, j, l));
                }
            }
        }
        Self {
            h,
            w,
            c,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[(i * self.w + j) * self.c + l]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, l: usize, v: f64) {
        self.data[(i * self.w + j) * self.c + l] = v;
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Collapse the spatial axes: `h x w x c` becomes `(h*w) x c`.
    pub fn reshape_to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.h * self.w,
            cols: self.c,
            data: self.data.clone(),
        }
    }

    pub fn into_matrix(self) -> Matrix {
        Matrix {
            rows: self.h * self.w,
            cols: self.c,
            data: self.data,
        }
    }

    /// Inverse of [`Tensor::reshape_to_matrix`].
    pub fn reshape_to_tensor(m: Matrix, h: usize, w: usize) -> Result<Tensor> {
        if m.rows != h * w {
            return Err(TensorError::Invalid {
                op: "reshape_to_tensor",
                msg: format!("{} rows cannot form a {h}x{w} grid", m.rows),
            });
        }
        Ok(Tensor {
            h,
            w,
            c: m.cols,
            data: m.data,
            requires_grad: false,
            grad: None,
        })
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: (self.h * self.w, self.c),
                right: (other.h * other.w, other.c),
            });
        }
        Ok(())
    }

    fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other, op)?;
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Tensor::new(self.h, self.w, self.c, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let mut out = self.clone();
        out.requires_grad = false;
        out.grad = None;
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `a*self + b*other`.
    pub fn lincomb(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor> {
        self.zip_map(other, "lincomb", |x, y| a * x + b * y)
    }
}

/// `out += a * b` for row-major `a: n x k`, `b: k x m`. Full 4 x 4 output
/// tiles accumulate in registers over the whole `k` loop; each entry is
/// still summed in increasing `p`, exactly as the textbook triple loop.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    let (n4, m4) = (n - n % 4, m - m % 4);
    for i in (0..n4).step_by(4) {
        let (r0, r1, r2, r3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        for j in (0..m4).step_by(4) {
            let mut acc = [[0.0f64; 4]; 4];
            let lanes = r0.iter().zip(r1).zip(r2).zip(r3).zip(b.chunks_exact(m));
            for ((((&a0, &a1), &a2), &a3), brow) in lanes {
                let bv = &brow[j..j + 4];
                let bv = [bv[0], bv[1], bv[2], bv[3]];
                for (acc_r, av) in acc.iter_mut().zip([a0, a1, a2, a3]) {
                    for c in 0..4 {
                        acc_r[c] += av * bv[c];
                    }
                }
            }
            for (r, ar) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * m + j..(i + r) * m + j + 4];
                for (o, v) in o.iter_mut().zip(ar) {
                    *o += v;
                }
            }
        }
        for r in i..i + 4 {
            for j in m4..m {
                let mut v = 0.0;
                for p in 0..k {
                    v += a[r * k + p] * b[p * m + j];
                }
                out[r * m + j] += v;
            }
        }
    }
    for r in n4..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for (&av, brow) in a[r * k..(r + 1) * k].iter().zip(b.chunks_exact(m.max(1))) {
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with independent partial sums so the adds pipeline.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Branch-free finiteness scan: `v * 0` is zero for finite `v` and NaN
/// otherwise, so the lane sums stay zero exactly when every entry is finite.
pub(crate) fn all_finite(data: &[f64]) -> bool {
    let mut acc = [0.0f64; 8];
    let mut chunks = data.chunks_exact(8);
    for c in &mut chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v * 0.0;
        }
    }
    chunks.remainder().iter().all(|v| v.is_finite()) && acc.iter().all(|&a| a == 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_grid_reshape() {
        let t = Tensor::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let m = t.reshape_to_matrix();
        assert_eq!(m.shape(), (1, 3));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn spatial_row_major_reshape() {
        let t = Tensor::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = t.reshape_to_matrix();
        assert_eq!(m.shape(), (4, 1));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.get(1, 0, 0), 3.0);
    }

    #[test]
    fn reshape_round_trip_is_bit_exact() {
        let t = Tensor::from_fn(3, 2, 4, |i, j, l| (i as f64).sin() + 0.1 * j as f64 - (l as f64).sqrt());
        let back = Tensor::reshape_to_tensor(t.reshape_to_matrix(), 3, 2).unwrap();
        assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn bad_lengths_are_rejected() {
        assert!(Tensor::new(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(Matrix::new(2, 3, vec![0.0; 5]).is_err());
        assert!(Tensor::reshape_to_tensor(Matrix::zeros(5, 2), 2, 2).is_err());
    }

    #[test]
    fn matmul_hand_checked() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn blocked_matmul_matches_triple_loop_exactly() {
        for (n, k, m) in [(1, 1, 1), (4, 4, 4), (5, 3, 7), (8, 6, 9), (7, 0, 5), (3, 2, 0), (9, 5, 4)] {
            let a = Matrix::from_fn(n, k, |i, j| ((i * 31 + j * 17) % 13) as f64 * 0.37 - 2.0);
            let b = Matrix::from_fn(k, m, |i, j| ((i * 7 + j * 11) % 5) as f64 * 0.91 - 1.3);
            let got = a.matmul(&b).unwrap();
            for i in 0..n {
                for j in 0..m {
                    let mut v = 0.0;
                    for p in 0..k {
                        v += a.get(i, p) * b.get(p, j);
                    }
                    assert_eq!(got.get(i, j), v, "({n},{k},{m}) at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.3 - 1.0);
        let b = Matrix::from_fn(5, 4, |i, j| (i as f64) - 0.7 * j as f64);
        let (x, y) = (a.matmul_nt(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() < 1e-12));
        let c = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        assert_eq!(a.matmul_tn(&c).unwrap(), a.transpose().matmul(&c).unwrap());
    }

    #[test]
    fn tensor_arith_rejects_mismatch() {
        let a = Tensor::zeros(2, 2, 1);
        let b = Tensor::zeros(2, 1, 2);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
    }
}
