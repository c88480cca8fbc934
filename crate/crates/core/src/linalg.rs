//! Small dense Hermitian matrix helpers and a flat per-grid-point matrix store.

use nalgebra::{DMatrix, DMatrixView};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn real_to_complex(m: &DMatrix<f64>) -> CMat {
    m.map(|x| Complex64::new(x, 0.0))
}

/// `(A + A*)/2`.
pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Eigenvalues (ascending) and matching orthonormal eigenvectors (columns) of a Hermitian matrix.
pub fn hermitian_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    if n == 1 {
        return (vec![m[(0, 0)].re], identity(1));
    }
    let h = hermitian_part(m);
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `f(A)` for Hermitian `A` through its eigendecomposition.
pub fn hermitian_fn(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (values, vectors) = hermitian_eigen(m);
    let n = values.len();
    let mut out = CMat::zeros(n, n);
    for (i, &lambda) in values.iter().enumerate() {
        let v = vectors.column(i);
        out += (&v * v.adjoint()).scale(f(lambda));
    }
    out
}

pub fn min_eigenvalue(m: &CMat) -> f64 {
    hermitian_eigen(m).0.first().copied().unwrap_or(0.0)
}

/// Principal square root of a Hermitian positive semidefinite matrix.
///
/// Eigenvalues in `[-tol·scale, 0)` are clamped to zero; anything more negative is an error.
pub fn psd_sqrt(m: &CMat, tol: f64) -> Result<CMat> {
    let (values, vectors) = hermitian_eigen(m);
    let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(&low) = values.first() {
        if low < -tol * scale {
            return Err(Error::SpectrumInvalid(format!(
                "matrix is not positive semidefinite (min eigenvalue {low:e})"
            )));
        }
    }
    let n = values.len();
    let mut out = CMat::zeros(n, n);
    for (i, &lambda) in values.iter().enumerate() {
        let v = vectors.column(i);
        out += (&v * v.adjoint()).scale(lambda.max(0.0).sqrt());
    }
    Ok(out)
}

/// Splits a `2n×2n` matrix into its four `n×n` blocks `[[00, 01], [10, 11]]`.
pub fn split_blocks(m: &CMat) -> [[CMat; 2]; 2] {
    let n = m.nrows() / 2;
    let b = |i: usize, j: usize| m.view((i * n, j * n), (n, n)).into_owned();
    [[b(0, 0), b(0, 1)], [b(1, 0), b(1, 1)]]
}

pub fn join_blocks(b: &[[CMat; 2]; 2]) -> CMat {
    let n = b[0][0].nrows();
    let mut m = CMat::zeros(2 * n, 2 * n);
    for i in 0..2 {
        for j in 0..2 {
            m.view_mut((i * n, j * n), (n, n)).copy_from(&b[i][j]);
        }
    }
    m
}

/// `diag(P, P)`: an `n×n` operator acting on each of the two field blocks.
pub fn block_diag2(p: &CMat) -> CMat {
    let z = CMat::zeros(p.nrows(), p.ncols());
    join_blocks(&[[p.clone(), z.clone()], [z, p.clone()]])
}

/// A column-major `rows×cols` complex matrix for every point of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MatField {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl MatField {
    pub fn zeros(points: usize, rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; points * rows * cols],
        }
    }

    pub fn from_fn(points: usize, rows: usize, cols: usize, f: impl Fn(usize) -> CMat) -> Self {
        let mut out = Self::zeros(points, rows, cols);
        for k in 0..points {
            out.set(k, &f(k));
        }
        out
    }

    pub fn points(&self) -> usize {
        self.data.len() / (self.rows * self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn view(&self, k: usize) -> DMatrixView<'_, Complex64> {
        let len = self.rows * self.cols;
        DMatrixView::from_slice(&self.data[k * len..(k + 1) * len], self.rows, self.cols)
    }

    pub fn get(&self, k: usize) -> CMat {
        self.view(k).into_owned()
    }

    pub fn slice(&self, k: usize) -> &[Complex64] {
        let len = self.rows * self.cols;
        &self.data[k * len..(k + 1) * len]
    }

    pub fn set(&mut self, k: usize, m: &CMat) {
        assert_eq!((m.nrows(), m.ncols()), (self.rows, self.cols));
        let len = self.rows * self.cols;
        self.data[k * len..(k + 1) * len].copy_from_slice(m.as_slice());
    }

    /// Entry `(r, c)` at every grid point.
    pub fn entry_channel(&self, r: usize, c: usize) -> Vec<Complex64> {
        let len = self.rows * self.cols;
        let off = c * self.rows + r;
        (0..self.points()).map(|k| self.data[k * len + off]).collect()
    }

    pub fn set_entry_channel(&mut self, r: usize, c: usize, values: &[Complex64]) {
        let len = self.rows * self.cols;
        let off = c * self.rows + r;
        for (k, v) in values.iter().enumerate() {
            self.data[k * len + off] = *v;
        }
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }
}

/// `y = M x` for a column-major square matrix stored flat.
#[inline]
pub fn matvec(m: &[Complex64], x: &[Complex64], y: &mut [Complex64]) {
    let n = x.len();
    for v in y.iter_mut() {
        *v = ZERO;
    }
    for (c, &xc) in x.iter().enumerate() {
        let col = &m[c * n..(c + 1) * n];
        for (yr, &mrc) in y.iter_mut().zip(col) {
            *yr += mrc * xc;
        }
    }
}
