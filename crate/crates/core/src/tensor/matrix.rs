use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Column vector.
    pub fn column(values: Vec<f64>) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · x` for a dense vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_cols(x.len())?;
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(x, &mut out);
        Ok(out)
    }

    /// `out += self · x`. Caller guarantees shapes.
    pub(crate) fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · y`. Caller guarantees shapes.
    pub(crate) fn tmatvec_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yr, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += yr * w;
            }
        }
    }

    /// `self += a ⊗ b` (outer product). Caller guarantees shapes.
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ar, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ar == 0.0 {
                continue;
            }
            for (o, &bc) in row.iter_mut().zip(b) {
                *o += ar * bc;
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "expected {}x{}, got {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    fn check_cols(&self, n: usize) -> Result<()> {
        if n != self.cols {
            return Err(Error::Dimension(format!(
                "{}x{} matrix applied to vector of length {n}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function, evaluated so that it never overflows.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

pub fn tanh_m(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Result<Matrix> {
    xavier_init_with(rows, cols, &mut seeded(seed))
}

/// Xavier/Glorot uniform: U(-√(6/(rows+cols)), +√(6/(rows+cols))).
pub fn xavier_init_with(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!(
            "xavier init needs nonzero dimensions, got {rows}x{cols}"
        )));
    }
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound)
        .map_err(|e| Error::Param(format!("xavier bound: {e}")))?;
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Ok(Matrix { rows, cols, data })
}

pub fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64) -> Result<Matrix> {
    let data = dropout_mask_with(rows * cols, rate, &mut seeded(seed))?;
    Matrix::new(rows, cols, data)
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1/(1-rate)`, so the mask has unit expectation.
pub fn dropout_mask_with(len: usize, rate: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::{dropout_mask, seeded, sigmoid, sigmoid_scalar, tanh_m, xavier_init, Error, Matrix};
    use proptest::prelude::*;
    use rand::Rng as _;
    use crate::rng::Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::column(vec![3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = seeded(3);
        for _ in 0..10 {
            let a = random_matrix(3, 4, &mut rng);
            let b = random_matrix(4, 2, &mut rng);
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("by 2x3"), "{msg}");
    }

    #[test]
    fn matvec_helpers_agree_with_matmul() {
        let mut rng = seeded(5);
        let w = random_matrix(4, 3, &mut rng);
        let x = vec![0.5, -1.0, 2.0];
        let via_mm = w.matmul(&Matrix::column(x.clone())).unwrap();
        let via_mv = w.matvec(&x).unwrap();
        for (a, b) in via_mm.data().iter().zip(&via_mv) {
            assert!((a - b).abs() < 1e-14);
        }
        let y = vec![1.0, 0.0, -2.0, 0.25];
        let mut t = vec![0.0; 3];
        w.tmatvec_acc(&y, &mut t);
        let expect = w.transpose().matvec(&y).unwrap();
        for (a, b) in t.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn activations_at_origin_and_symmetry() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        let mut rng = seeded(11);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-50.0..50.0);
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-12);
        }
        assert_eq!(sigmoid_scalar(-1e4), 0.0);
        assert_eq!(sigmoid_scalar(1e4), 1.0);
    }

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let a = xavier_init(100, 100, 9).unwrap();
        assert!(a.bit_eq(&xavier_init(100, 100, 9).unwrap()));
        assert!(!a.bit_eq(&xavier_init(100, 100, 10).unwrap()));
        assert!(a.max_abs() <= (6.0f64 / 200.0).sqrt());
        assert!(matches!(xavier_init(0, 3, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn xavier_mean_is_near_zero() {
        // Var of U(-b, b) is b²/3, so the std of a 10⁴-sample mean is b/√(3·10⁴).
        let m = xavier_init(100, 100, 42).unwrap();
        let bound = (6.0f64 / 200.0).sqrt();
        let mean = m.data().iter().sum::<f64>() / m.len() as f64;
        assert!(mean.abs() < 3.0 * bound / (3.0e4f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn dropout_mask_values_and_frequency() {
        assert!(dropout_mask(3, 3, 0.0, 1).unwrap().data().iter().all(|&v| v == 1.0));
        let m = dropout_mask(1, 100_000, 0.2, 4).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.25));
        let zeros = m.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.2).abs() < 0.01, "zero fraction {zeros}");
        assert!(matches!(dropout_mask(1, 1, 1.0, 0), Err(Error::Param(_))));
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5, p in 1usize..5) {
            let mut rng = seeded(seed);
            let a = random_matrix(n, k, &mut rng);
            let b = random_matrix(k, m, &mut rng);
            let c = random_matrix(m, p, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn activations_stay_finite_and_bounded(xs in proptest::collection::vec(-1e3f64..1e3, 1..50)) {
            let m = Matrix::column(xs);
            let s = sigmoid(&m);
            let t = tanh_m(&m);
            prop_assert!(s.is_finite() && t.is_finite());
            prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }
}
