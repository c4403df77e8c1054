//! Dense row-major matrices and the scalar trait shared by every numeric path.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the autodiff engine.
///
/// Implemented for `f32` (training and inference) and `f64` (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Additive mask value for padded keys. Finite so softmax never sees NaN.
    const MASK_NEG: Self;

    /// `c = alpha * a * b + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n`, `m x n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const MASK_NEG: f32 = -1e9;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const MASK_NEG: f64 = -1e9;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major 2-D tensor. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, value: F) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: F) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::new(rows, cols, data.iter().map(|&x| F::c(x)).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
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

    pub fn norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum::<F>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| G::c(x.f64())).collect() }
    }

    /// Rows `start..start + count` as a new tensor.
    pub fn slice_rows(&self, start: usize, count: usize) -> Self {
        let c = self.cols;
        Self::new(count, c, self.data[start * c..(start + count) * c].to_vec())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }
}

/// `op(a) * op(b)` where `op` optionally transposes. Shapes are those of the stored tensors.
pub fn matmul<F: Real>(a: &Tensor<F>, ta: bool, b: &Tensor<F>, tb: bool) -> Tensor<F> {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
    let mut out = Tensor::zeros(m, n);
    gemm_acc(a, ta, b, tb, &mut out, F::zero());
    out
}

/// `out = op(a) * op(b) + beta * out`.
pub fn gemm_acc<F: Real>(a: &Tensor<F>, ta: bool, b: &Tensor<F>, tb: bool, out: &mut Tensor<F>, beta: F) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in out.data.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents derived from the tensors' own shapes.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive_for_all_transposes() {
        let a = Tensor::<f64>::from_f64(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_f64(3, 2, &[7., 8., 9., 10., 11., 12.]);
        let ab = matmul(&a, false, &b, false);
        assert_eq!(ab.data, vec![58., 64., 139., 154.]);
        let at = a.transpose();
        let bt = b.transpose();
        assert_eq!(matmul(&at, true, &b, false), ab);
        assert_eq!(matmul(&a, false, &bt, true), ab);
        assert_eq!(matmul(&at, true, &bt, true), ab);
    }

    #[test]
    fn empty_inner_dimension_gives_zeros() {
        let a = Tensor::<f32>::zeros(2, 0);
        let b = Tensor::<f32>::zeros(0, 3);
        assert_eq!(matmul(&a, false, &b, false), Tensor::zeros(2, 3));
    }
}
