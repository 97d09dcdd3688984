//! Dense row-major `f32` matrices.
//!
//! Every product accumulates in `f64` with the inner dimension as the
//! innermost loop, index ascending, and rounds to `f32` once per output
//! element. The order is fixed so that results are bit-reproducible no
//! matter how callers schedule work.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// A dense row-major matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from row-major values, rejecting bad shapes and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        ensure_finite(&values, "matrix values")?;
        Ok(Self { rows, cols, values })
    }

    /// Internal constructor for values already known to be well formed.
    pub(crate) fn from_parts(rows: usize, cols: usize, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        Self { rows, cols, values }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        assert!(value.is_finite());
        Self::from_parts(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a slice of equally long rows.
    ///
    /// ```
    /// use fedlpp::Matrix;
    /// let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    /// assert_eq!(m.get(1, 0), 3.0);
    /// ```
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.values
    }

    /// Column `col` as an owned vector.
    pub fn column(&self, col: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    /// Gathers the listed columns, in order, into a new matrix.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        assert!(!cols.is_empty(), "cannot select zero columns");
        let mut values = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = &self.values[r * self.cols..(r + 1) * self.cols];
            values.extend(cols.iter().map(|&c| row[c]));
        }
        Self::from_parts(self.rows, cols.len(), values)
    }

    pub fn transpose(&self) -> Self {
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        Self::from_parts(self.cols, self.rows, values)
    }

    /// Standard matrix product `self · other`.
    ///
    /// ```
    /// use fedlpp::Matrix;
    /// let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    /// let ones = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
    /// assert_eq!(a.matmul(&ones).unwrap().as_slice(), &[3.0, 7.0]);
    /// ```
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let out = product(self, false, other, false);
        ensure_finite(&out.values, "matmul result")?;
        Ok(out)
    }

    /// Elementwise `self + c · other`.
    pub fn add_scaled(&self, other: &Matrix, c: f32) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        if !c.is_finite() {
            return Err(Error::NonFinite("add_scaled coefficient".into()));
        }
        let values: Vec<f32> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| x + c * y)
            .collect();
        ensure_finite(&values, "add_scaled result")?;
        Ok(Self::from_parts(self.rows, self.cols, values))
    }

    /// In-place `self += c · other`; shapes must already agree.
    pub(crate) fn axpy(&mut self, c: f32, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += c * y;
        }
    }

    /// A `rows × cols` matrix of independent `Normal(mean, stddev²)` draws.
    pub fn gaussian_fill(
        rows: usize,
        cols: usize,
        mean: f32,
        stddev: f32,
        rng: &mut RandomSource,
    ) -> Result<Matrix> {
        if !mean.is_finite() || !stddev.is_finite() {
            return Err(Error::NonFinite("gaussian_fill parameters".into()));
        }
        if stddev < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "stddev must be non-negative, got {stddev}"
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if stddev == 0.0 {
            return Ok(Self::filled(rows, cols, mean));
        }
        let normal = Normal::new(mean, stddev).expect("validated parameters");
        let values = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Ok(Self::from_parts(rows, cols, values))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Sum of squared entries, accumulated in `f64`.
    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }
}

pub(crate) fn ensure_finite(values: &[f32], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `op(a) · op(b)` where `op` optionally transposes. Shapes must agree; no
/// finiteness check.
pub(crate) fn product(a: &Matrix, transpose_a: bool, b: &Matrix, transpose_b: bool) -> Matrix {
    let lhs;
    let lhs = if transpose_a {
        lhs = a.transpose();
        &lhs
    } else {
        a
    };
    // The kernel wants the right operand with its columns laid out as rows.
    let rhs_t;
    let rhs_t = if transpose_b {
        b
    } else {
        rhs_t = b.transpose();
        &rhs_t
    };
    let (m, k) = lhs.shape();
    let n = rhs_t.rows;
    debug_assert_eq!(k, rhs_t.cols);
    let mut out = vec![0.0f32; m * n];
    gemm_nt(&lhs.values, &rhs_t.values, m, k, n, &mut out);
    Matrix::from_parts(m, n, out)
}

/// `out[i][j] = Σ_p a[i][p] · bt[j][p]` with `f64` accumulators, `p`
/// ascending. Four outputs are computed side by side for instruction-level
/// parallelism; each one still sums in the fixed order.
fn gemm_nt(a: &[f32], bt: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 4 <= n {
            let b0 = &bt[j * k..(j + 1) * k];
            let b1 = &bt[(j + 1) * k..(j + 2) * k];
            let b2 = &bt[(j + 2) * k..(j + 3) * k];
            let b3 = &bt[(j + 3) * k..(j + 4) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for p in 0..k {
                let x = f64::from(row[p]);
                s0 += x * f64::from(b0[p]);
                s1 += x * f64::from(b1[p]);
                s2 += x * f64::from(b2[p]);
                s3 += x * f64::from(b3[p]);
            }
            out_row[j] = s0 as f32;
            out_row[j + 1] = s1 as f32;
            out_row[j + 2] = s2 as f32;
            out_row[j + 3] = s3 as f32;
            j += 4;
        }
        while j < n {
            let bj = &bt[j * k..(j + 1) * k];
            let mut s = 0.0f64;
            for p in 0..k {
                s += f64::from(row[p]) * f64::from(bj[p]);
            }
            out_row[j] = s as f32;
            j += 1;
        }
    }
}
