//! Dense row-major matrices and the handful of kernels the decoder needs.
//!
//! Every kernel accumulates in a fixed order that depends only on the
//! operand shapes, so output row `i` is a function of input row `i` (and the
//! right-hand operand) alone. The causal tests rely on this.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let o_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (p, &a) in a_row.iter().enumerate() {
                axpy(a, rhs.row(p), o_row);
            }
        }
        out
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix<T>) -> Matrix<T> {
        self.matmul(&rhs.transpose())
    }

    /// `acc += selfᵀ · rhs`, the weight-gradient shape.
    pub fn t_matmul_acc(&self, rhs: &Matrix<T>, acc: &mut Matrix<T>) {
        assert_eq!(self.rows, rhs.rows, "t_matmul row counts differ");
        assert_eq!(acc.shape(), (self.cols, rhs.cols), "t_matmul accumulator shape");
        for r in 0..self.rows {
            let rhs_row = rhs.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                axpy(a, rhs_row, acc.row_mut(i));
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape());
        add_into(&mut self.data, &other.data);
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// `y += a * x`.
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(x)`.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}
