use std::fmt;

use wide::f64x8;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Direction along which a reduction or normalization runs.
///
/// `Cols` normalizes across the columns of each row (every row sums to one),
/// `Rows` normalizes across the rows of each column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
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

    /// Builds a matrix from equally sized rows.
    ///
    /// Panics when the rows are ragged; this is meant for literals and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows in Matrix::from_rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
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

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.expect_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.row_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Selects rows by index, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for r in self.row_iter() {
            for _ in 0..times {
                data.extend_from_slice(r);
            }
        }
        Matrix {
            rows: self.rows * times,
            cols: self.cols,
            data,
        }
    }

    /// The whole matrix stacked `times` times.
    pub fn tile_rows(&self, times: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Matrix {
            rows: self.rows * times,
            cols: self.cols,
            data,
        }
    }

    /// Sums consecutive blocks of `block` rows; the inverse shape of [`Matrix::repeat_rows`].
    pub fn sum_row_blocks(&self, block: usize) -> Result<Matrix> {
        if block == 0 || self.rows % block != 0 {
            return Err(Error::Shape {
                op: "sum_row_blocks",
                lhs: self.shape(),
                rhs: (block, 1),
            });
        }
        let groups = self.rows / block;
        let mut out = Matrix::zeros(groups, self.cols);
        for g in 0..groups {
            let dst = &mut out.data[g * self.cols..(g + 1) * self.cols];
            for j in 0..block {
                let src = &self.data[(g * block + j) * self.cols..(g * block + j + 1) * self.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(out)
    }

    /// Sums the `times` stacked copies produced by [`Matrix::tile_rows`].
    pub fn sum_tiles(&self, times: usize) -> Result<Matrix> {
        if times == 0 || self.rows % times != 0 {
            return Err(Error::Shape {
                op: "sum_tiles",
                lhs: self.shape(),
                rhs: (times, 1),
            });
        }
        let inner = self.rows / times;
        let n = inner * self.cols;
        let mut out = Matrix::zeros(inner, self.cols);
        for t in 0..times {
            for (d, s) in out.data.iter_mut().zip(&self.data[t * n..(t + 1) * n]) {
                *d += s;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 × cols` row.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in self.row_iter() {
            for (d, s) in out.data.iter_mut().zip(r) {
                *d += s;
            }
        }
        out
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Vertical concatenation.
    pub fn concat_rows(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for (i, r) in self.row_iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            if i >= 8 {
                write!(f, "...")?;
                break;
            }
            write!(f, "{r:?}")?;
        }
        write!(f, "]")
    }
}

/// Operand of [`gemm`]: a matrix, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub m: &'a Matrix,
    pub transposed: bool,
}

impl<'a> Operand<'a> {
    pub fn plain(m: &'a Matrix) -> Self {
        Self { m, transposed: false }
    }

    pub fn t(m: &'a Matrix) -> Self {
        Self { m, transposed: true }
    }

    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.m.cols, self.m.rows)
        } else {
            (self.m.rows, self.m.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let ld = self.m.cols as isize;
        if self.transposed {
            (1, ld)
        } else {
            (ld, 1)
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`.
pub(crate) fn gemm(alpha: f64, a: Operand<'_>, b: Operand<'_>, beta: f64, c: &mut Matrix) -> Result<()> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 || c.shape() != (m, n) {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.dims(),
            rhs: b.dims(),
        });
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return Ok(());
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: dimensions and strides describe the exact extents of the
    // backing buffers, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.m.data.as_ptr(),
            rsa,
            csa,
            b.m.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

pub(crate) fn product(a: Operand<'_>, b: Operand<'_>) -> Result<Matrix> {
    let mut c = Matrix::zeros(a.dims().0, b.dims().1);
    gemm(1.0, a, b, 0.0, &mut c)?;
    Ok(c)
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    product(Operand::plain(a), Operand::plain(b))
}

/// `x ← eˣ` over a slice, eight lanes at a time; the tail is padded so every
/// element goes through the same kernel.
pub(crate) fn exp_in_place(xs: &mut [f64]) {
    let mut chunks = xs.chunks_exact_mut(LANES);
    for c in &mut chunks {
        c.copy_from_slice(&lanes(c).exp().to_array());
    }
    let tail = chunks.into_remainder();
    if !tail.is_empty() {
        let out = padded(tail, 0.0).exp().to_array();
        let n = tail.len();
        tail.copy_from_slice(&out[..n]);
    }
}

#[inline]
pub(crate) fn exp_scalar(x: f64) -> f64 {
    f64x8::splat(x).exp().to_array()[0]
}

const LANES: usize = 8;

fn lanes(c: &[f64]) -> f64x8 {
    f64x8::from(<[f64; LANES]>::try_from(c).expect("full chunk"))
}

fn padded(tail: &[f64], fill: f64) -> f64x8 {
    let mut l = [fill; LANES];
    l[..tail.len()].copy_from_slice(tail);
    f64x8::from(l)
}

/// `Σ a_i b_i` with one accumulator per lane.
pub(crate) fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = f64x8::ZERO;
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc += lanes(x) * lanes(y);
    }
    acc.reduce_add() + ta.iter().zip(tb).map(|(x, y)| x * y).sum::<f64>()
}

/// Max-shifted softmax of one contiguous slice.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let chunks = xs.chunks_exact(LANES);
    let tail_max = chunks.remainder().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max = chunks
        .fold(f64x8::splat(f64::NEG_INFINITY), |m, c| m.max(lanes(c)))
        .to_array()
        .into_iter()
        .fold(tail_max, f64::max);
    let shift = f64x8::splat(max);
    let mut total = f64x8::ZERO;
    let mut chunks = xs.chunks_exact_mut(LANES);
    for c in &mut chunks {
        let e = (lanes(c) - shift).exp();
        total += e;
        c.copy_from_slice(&e.to_array());
    }
    let tail = chunks.into_remainder();
    if !tail.is_empty() {
        let e = (padded(tail, f64::NEG_INFINITY) - shift).exp();
        total += e;
        let n = tail.len();
        tail.copy_from_slice(&e.to_array()[..n]);
    }
    let total = total.reduce_add();
    xs.iter_mut().for_each(|x| *x /= total);
}

/// Max-shifted softmax along `axis`.
pub fn softmax_axis(m: &Matrix, axis: Axis) -> Matrix {
    match axis {
        Axis::Cols => {
            let mut out = m.clone();
            if m.cols > 0 {
                out.data.chunks_exact_mut(m.cols).for_each(softmax_in_place);
            }
            out
        }
        Axis::Rows => softmax_row_blocks(m, m.rows.max(1)).expect("block equals row count"),
    }
}

/// Softmax down each column, independently inside consecutive blocks of
/// `block` rows.
pub fn softmax_row_blocks(m: &Matrix, block: usize) -> Result<Matrix> {
    if m.rows == 0 || m.cols == 0 {
        return Ok(m.clone());
    }
    if block == 0 || m.rows % block != 0 {
        return Err(Error::Shape {
            op: "softmax_row_blocks",
            lhs: m.shape(),
            rhs: (block, 1),
        });
    }
    let mut out = m.clone();
    let cols = m.cols;
    let mut max = vec![0.0; cols];
    let mut total = vec![0.0; cols];
    for chunk in out.data.chunks_exact_mut(block * cols) {
        max.fill(f64::NEG_INFINITY);
        for row in chunk.chunks_exact(cols) {
            max.iter_mut().zip(row).for_each(|(m, &x)| *m = m.max(x));
        }
        for row in chunk.chunks_exact_mut(cols) {
            row.iter_mut().zip(&max).for_each(|(x, m)| *x -= m);
        }
        exp_in_place(chunk);
        total.fill(0.0);
        for row in chunk.chunks_exact(cols) {
            total.iter_mut().zip(row).for_each(|(t, x)| *t += x);
        }
        for row in chunk.chunks_exact_mut(cols) {
            row.iter_mut().zip(&total).for_each(|(x, t)| *x /= t);
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    let e = exp_scalar(-x.abs());
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// Entrywise logistic function.
pub fn sigmoid(m: &Matrix) -> Matrix {
    let mut e: Vec<f64> = m.data.iter().map(|x| -x.abs()).collect();
    exp_in_place(&mut e);
    let data = m
        .data
        .iter()
        .zip(e)
        .map(|(&x, e)| if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) })
        .collect();
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data,
    }
}

/// Norm below which a row counts as zero.
pub const ZERO_ROW_NORM: f64 = 1e-12;

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for (r, norm) in m.row_norms().into_iter().enumerate() {
        if !(norm > ZERO_ROW_NORM) {
            return Err(Error::Degenerate { row: r, norm });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_literal() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let b = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            Matrix::from_rows(&[[19.0, 22.0], [43.0, 50.0]])
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 7, 3);
        let b = random(&mut rng, 3, 5);
        let diff = matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)).unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { lhs: (2, 3), rhs: (2, 3), .. }));
    }

    #[test]
    fn transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 6);
        let b = random(&mut rng, 5, 6);
        let got = product(Operand::plain(&a), Operand::t(&b)).unwrap();
        let want = naive_matmul(&a, &b.transpose());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        let got = product(Operand::t(&a), Operand::plain(&a)).unwrap();
        let want = naive_matmul(&a.transpose(), &a);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_axis(&Matrix::row_vector(&[0.0, 0.0, 0.0]), Axis::Cols);
        for v in s.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_axis(&Matrix::row_vector(&[1000.0, 1000.0, 1000.0]), Axis::Cols);
        for v in s.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_axis(&Matrix::row_vector(&[0.0, 3f64.ln()]), Axis::Cols);
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
        let s = softmax_axis(&Matrix::column_vector(&[0.0, 3f64.ln()]), Axis::Rows);
        assert!((s.get(1, 0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(1.0 - sigmoid_scalar(40.0) < 1e-17);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
        for x in [0.3, 2.0, 17.5] {
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize_rows(&Matrix::row_vector(&[3.0, 4.0])).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);
        let unit = Matrix::row_vector(&[0.0, 1.0]);
        assert_eq!(l2_normalize_rows(&unit).unwrap(), unit);
        let err = l2_normalize_rows(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::Degenerate { row: 1, .. }));
    }

    #[test]
    fn block_helpers_are_adjoint_shapes() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let rep = m.repeat_rows(3);
        assert_eq!(rep.rows(), 6);
        assert_eq!(rep.row(2), &[1.0, 2.0]);
        assert_eq!(rep.sum_row_blocks(3).unwrap(), m.scale(3.0));
        let tiled = m.tile_rows(2);
        assert_eq!(tiled.row(2), &[1.0, 2.0]);
        assert_eq!(tiled.sum_tiles(2).unwrap(), m.scale(2.0));
    }

    fn matrix_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(m in matrix_strategy(6, 6), shift in -1e3f64..1e3) {
            let s = softmax_axis(&m, Axis::Cols);
            for r in s.row_iter() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(r.iter().all(|&v| v > 0.0 || v == 0.0));
            }
            let shifted = softmax_axis(&m.map(|v| v + shift), Axis::Cols);
            prop_assert!(shifted.max_abs_diff(&s).unwrap() < 1e-12);
            let down = softmax_axis(&m, Axis::Rows);
            for c in down.column_sums().as_slice() {
                prop_assert!((c - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_is_idempotent(m in matrix_strategy(6, 6)) {
            prop_assume!(m.row_norms().iter().all(|&n| n > 1e-6));
            let once = l2_normalize_rows(&m).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            prop_assert!(once.max_abs_diff(&twice).unwrap() < 1e-12);
            for n in once.row_norms() {
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn sigmoid_strictly_inside_unit_interval(x in -30.0f64..30.0) {
            let y = sigmoid_scalar(x);
            prop_assert!(y > 0.0 && y < 1.0);
        }

        #[test]
        fn matmul_agrees_with_oracle(seed in 0u64..1000, m in 1usize..64, k in 1usize..64, n in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let want = naive_matmul(&a, &b);
            let got = matmul(&a, &b).unwrap();
            let scale = want.max_abs().max(1.0);
            prop_assert!(got.max_abs_diff(&want).unwrap() / scale < 1e-12);
        }
    }
}
