//! Dense row-major matrices and the small kernel set the model is built from.
//!
//! Everything is 2-D; vectors are 1-by-n matrices and scalars 1-by-1. The
//! free-function kernels here are shared by the autodiff tape and the
//! inference-only decoding path so both compute bit-identical values.

use crate::scalar::Scalar;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Row vector (1-by-n) from a slice.
    pub fn row_vec(data: &[S]) -> Self {
        Mat::from_vec(1, data.len(), data.to_vec())
    }

    /// 1-by-1 matrix holding one scalar.
    pub fn scalar(x: S) -> Self {
        Mat::from_vec(1, 1, vec![x])
    }

    /// Uniform init in [-limit, limit], drawn as f64 so the stream of random
    /// numbers is identical across scalar types.
    pub fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(S::of(rng.gen_range(-limit..limit)));
        }
        Mat { rows, cols, data }
    }

    /// Glorot-style uniform init for a fan_in-by-fan_out weight.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(fan_in, fan_out, limit, rng)
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
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> S {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut S {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single element of a 1-by-1 matrix.
    pub fn item(&self) -> S {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar matrix");
        self.data[0]
    }

    /// Appends one row; the matrix may start with zero rows.
    pub fn push_row(&mut self, row: &[S]) {
        assert_eq!(row.len(), self.cols, "push_row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *out.at_mut(j, i) = self.at(i, j);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += k * other
    pub fn add_scaled(&mut self, other: &Mat<S>, k: S) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Mat<S>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// C = A . B
pub fn matmul<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let mut out = Mat::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut out, S::one());
    out
}

/// out += k * (A . B); the k-innermost loop order keeps the hot loop
/// contiguous so it vectorizes.
pub fn matmul_acc<S: Scalar>(a: &Mat<S>, b: &Mat<S>, out: &mut Mat<S>, k: S) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(out.rows, a.rows);
    assert_eq!(out.cols, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = b.row(kk);
            let f = k * aik;
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += f * bkj;
            }
        }
    }
}

/// C = A . B^T (rows of both operands are dotted together).
pub fn matmul_tb<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    assert_eq!(a.cols, b.cols, "matmul_tb inner dimension mismatch");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..b.rows {
            orow[j] = dot(arow, b.row(j));
        }
    }
    out
}

/// out += k * (A^T . B); used by matmul backward for the weight gradient.
pub fn matmul_ta_acc<S: Scalar>(a: &Mat<S>, b: &Mat<S>, out: &mut Mat<S>, k: S) {
    assert_eq!(a.rows, b.rows, "matmul_ta outer dimension mismatch");
    assert_eq!(out.rows, a.cols);
    assert_eq!(out.cols, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = out.row_mut(kk);
            let f = k * aik;
            for (o, &bij) in orow.iter_mut().zip(brow) {
                *o += f * bij;
            }
        }
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// In-place softmax of one row, restricted to `allowed` positions when given;
/// excluded positions come out exactly zero.
pub fn softmax_row_masked<S: Scalar>(row: &mut [S], allowed: Option<&[bool]>) {
    let mut max = S::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if allowed.map_or(true, |m| m[j]) && x > max {
            max = x;
        }
    }
    assert!(
        max > S::neg_infinity(),
        "softmax row with no allowed positions"
    );
    let mut sum = S::zero();
    for j in 0..row.len() {
        if allowed.map_or(true, |m| m[j]) {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum += e;
        } else {
            row[j] = S::zero();
        }
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Per-row layer normalization without the affine part: zero mean, unit
/// population variance (plus eps inside the square root).
pub fn layer_norm_row<S: Scalar>(row: &[S], eps: S, out: &mut [S]) {
    let n = S::of(row.len() as f64);
    let mut mean = S::zero();
    for &x in row {
        mean += x;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    var = var / n;
    let inv = (var + eps).sqrt().recip();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - mean) * inv;
    }
}

/// Tanh-form GELU; used as the activation everywhere a smooth gate is needed.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(0.7978845608028654); // sqrt(2/pi)
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

#[inline]
pub fn gelu_deriv<S: Scalar>(x: S) -> S {
    let c = S::of(0.7978845608028654);
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let three = S::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known_product() {
        let a = Mat::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_tb_matches_explicit_transpose() {
        let a = Mat::from_fn(3, 4, |i, j| (i * 7 + j) as f64 * 0.3 - 1.0);
        let b = Mat::from_fn(5, 4, |i, j| (i + j * 3) as f64 * 0.1);
        let direct = matmul_tb(&a, &b);
        let via_t = matmul(&a, &b.transpose());
        assert!(direct.max_abs_diff(&via_t) < 1e-12);
    }

    #[test]
    fn matmul_ta_matches_explicit_transpose() {
        let a = Mat::from_fn(4, 3, |i, j| (i * 2 + j) as f64 * 0.25 - 0.5);
        let b = Mat::from_fn(4, 5, |i, j| (i + j) as f64 * 0.2);
        let mut acc = Mat::zeros(3, 5);
        matmul_ta_acc(&a, &b, &mut acc, 1.0);
        let via_t = matmul(&a.transpose(), &b);
        assert!(acc.max_abs_diff(&via_t) < 1e-12);
    }

    #[test]
    fn softmax_row_sums_to_one_and_masks_exactly() {
        let mut row = vec![0.5f64, 2.0, -1.0, 0.0];
        let allowed = vec![true, false, true, true];
        softmax_row_masked(&mut row, Some(&allowed));
        assert_eq!(row[1], 0.0);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_row_zero_mean_unit_variance() {
        let row = vec![1.0f64, 3.0, -2.0, 7.0, 0.5];
        let mut out = vec![0.0; 5];
        layer_norm_row(&row, 0.0, &mut out);
        let mean: f64 = out.iter().sum::<f64>() / 5.0;
        let var: f64 = out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_deriv_matches_finite_difference() {
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_deriv(x)).abs() < 1e-8, "x={x}");
        }
    }
}
