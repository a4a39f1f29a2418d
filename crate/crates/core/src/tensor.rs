//! Dense row-major matrices.
//!
//! Everything in the crate — weights, latents (flattened to `pixels x channels`),
//! token sequences, attention maps — is a 2-D [`Mat`]. Shape mismatches in
//! matrix arithmetic are programming errors and panic; operations whose inputs
//! come from users validate shapes up front and return [`crate::Error`] instead.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;

use crate::Scalar;

/// Dense row-major matrix over a [`Scalar`] type.
#[derive(Clone, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    /// Matrix filled with a constant.
    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Mat { rows, cols, data: vec![value; rows * cols] }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    /// Builds from a row-major buffer; panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length {} != {rows}x{cols}", data.len());
        Mat { rows, cols, data }
    }

    /// Builds from `f64` literals, converting into the scalar type.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&x| S::of(x)));
        }
        Mat { rows: r, cols: c, data }
    }

    /// Builds element-wise from a function of `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// I.i.d. Gaussian entries via Box-Muller, deterministic given the RNG.
    pub fn randn(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut impl Rng) -> Self {
        Mat::from_fn(rows, cols, |_, _| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            S::of(mean + std * z)
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `(rows, cols)` pair.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable row-major backing slice.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutable row `i`.
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Single row as a new `1 x cols` matrix.
    pub fn row_mat(&self, i: usize) -> Mat<S> {
        Mat::from_vec(1, self.cols, self.row(i).to_vec())
    }

    /// Element-wise map.
    pub fn map(&self, f: impl Fn(S) -> S) -> Mat<S> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Element-wise combination of two same-shape matrices.
    pub fn zip_map(&self, other: &Mat<S>, f: impl Fn(S, S) -> S) -> Mat<S> {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in zip_map");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    /// Element-wise sum.
    pub fn add(&self, other: &Mat<S>) -> Mat<S> {
        self.zip_map(other, |a, b| a + b)
    }

    /// Element-wise difference.
    pub fn sub(&self, other: &Mat<S>) -> Mat<S> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&self, other: &Mat<S>) -> Mat<S> {
        self.zip_map(other, |a, b| a * b)
    }

    /// Scales every entry.
    pub fn scale(&self, s: S) -> Mat<S> {
        self.map(|x| x * s)
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b;
                }
            }
        }
        out
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Mat<S> {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Kronecker product `self (x) other`.
    pub fn kron(&self, other: &Mat<S>) -> Mat<S> {
        let (a1, a2) = self.shape();
        let (b1, b2) = other.shape();
        Mat::from_fn(a1 * b1, a2 * b2, |i, j| self[(i / b1, j / b2)] * other[(i % b1, j % b2)])
    }

    /// Euclidean norm of each column, floored at `eps`; returns `1 x cols`.
    pub fn col_norms(&self, eps: S) -> Mat<S> {
        let mut out: Mat<S> = Mat::zeros(1, self.cols);
        for i in 0..self.rows {
            for (j, &x) in self.row(i).iter().enumerate() {
                out[(0, j)] += x * x;
            }
        }
        for j in 0..self.cols {
            out[(0, j)] = out[(0, j)].sqrt().max(eps);
        }
        out
    }

    /// Sum of all entries.
    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Frobenius norm.
    pub fn frob_norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum::<S>().sqrt()
    }

    /// Flattened dot product with a same-shape matrix.
    pub fn dot(&self, other: &Mat<S>) -> S {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in dot");
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    /// Largest absolute entry (0 for empty matrices).
    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    /// Largest absolute entry-wise difference from `other`.
    pub fn max_abs_diff(&self, other: &Mat<S>) -> S {
        self.sub(other).max_abs()
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Horizontal concatenation.
    pub fn concat_cols(parts: &[&Mat<S>]) -> Mat<S> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "row mismatch in concat_cols");
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut at = 0;
            for p in parts {
                out.row_mut(i)[at..at + p.cols].copy_from_slice(p.row(i));
                at += p.cols;
            }
        }
        out
    }

    /// Vertical concatenation.
    pub fn vstack(parts: &[&Mat<S>]) -> Mat<S> {
        assert!(!parts.is_empty(), "vstack of nothing");
        let cols = parts[0].cols;
        assert!(parts.iter().all(|p| p.cols == cols), "col mismatch in vstack");
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Mat { rows, cols, data }
    }

    /// Copy of columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Mat<S> {
        assert!(start + len <= self.cols, "slice_cols out of range");
        Mat::from_fn(self.rows, len, |i, j| self[(i, start + j)])
    }
}

impl<S: Scalar> Index<(usize, usize)> for Mat<S> {
    type Output = S;

    fn index(&self, (i, j): (usize, usize)) -> &S {
        debug_assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of {}x{}", self.rows, self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<S: Scalar> IndexMut<(usize, usize)> for Mat<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        debug_assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of {}x{}", self.rows, self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<S: Scalar> fmt::Debug for Mat<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>10.5} ", self[(i, j)])?;
            }
            writeln!(f, "{}", if self.cols > 8 { "..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}
