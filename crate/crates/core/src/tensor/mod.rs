//! Dense row-major f32 tensors and the handful of ops the model needs.
//!
//! Tensors are immutable once built; the buffer is reference counted so
//! clones are cheap and values can be shared across threads.

mod kernels;
pub mod tape;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::kl_row;

pub(crate) use kernels::{dot, gemm_nn, gemm_nt, gemm_tn};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f32]>,
}

impl Tensor {
    /// Builds a tensor, rejecting a buffer whose length disagrees with the
    /// shape or that contains NaN/Inf.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        check_finite("tensor", &data)?;
        Ok(Self { shape, data: data.into() })
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: data.into() }
    }

    /// Like `new` but reports non-finite output as coming from `op`.
    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_finite(op, &data)?;
        Ok(Self::from_raw(shape, data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_raw(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Treats the tensor as `[rows, last_dim]`.
    pub fn as_rows(&self) -> (usize, usize) {
        match self.shape.last() {
            None => (1, 1),
            Some(&0) => (0, 0),
            Some(&cols) => (self.data.len() / cols, cols),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, cols) = self.as_rows();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }

    /// Equality of shape and of every value's bit pattern.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn zip_map(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::checked(op, a.shape.clone(), data)
}

fn map(op: &'static str, a: &Tensor, f: impl Fn(f32) -> f32) -> Result<Tensor> {
    Tensor::checked(op, a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
}

/// `a[m,k] × b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
    }
    Tensor::checked("matmul", vec![m, n], gemm_nn(a.data(), b.data(), m, k, n))
}

/// `a[m,k] × b[n,k]ᵀ`, the layout used for `x Wᵀ` with row-major `W[d_out, d_in]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul_nt")?;
    let (n, k2) = b.matrix_dims("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("inner dims {k} vs {k2}")));
    }
    Tensor::checked("matmul_nt", vec![m, n], gemm_nt(a.data(), b.data(), m, k, n))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("mul", a, b, |x, y| x * y)
}

/// Adds a row vector (any shape holding `cols` values) to every row of a matrix.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (_, cols) = a.as_rows();
    if row.len() != cols {
        return Err(Error::shape("add_row", format!("{:?} + row {:?}", a.shape, row.shape)));
    }
    let data = a.data.chunks(cols.max(1)).flat_map(|r| r.iter().zip(row.data()).map(|(x, b)| x + b)).collect();
    Tensor::checked("add_row", a.shape.clone(), data)
}

pub fn scale(a: &Tensor, s: f32) -> Result<Tensor> {
    map("scale", a, |x| x * s)
}

pub fn relu(a: &Tensor) -> Result<Tensor> {
    map("relu", a, |x| if x > 0.0 { x } else { 0.0 })
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(a: &Tensor) -> Result<Tensor> {
    map("silu", a, |x| x * sigmoid(x))
}

/// Per-row root-mean-square normalisation scaled by `gain`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    rms_norm_with_inv(x, gain, eps).map(|(t, _)| t)
}

pub(crate) fn rms_norm_with_inv(x: &Tensor, gain: &Tensor, eps: f32) -> Result<(Tensor, Vec<f32>)> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("rms_norm eps must be >= 0, got {eps}")));
    }
    let (rows, cols) = x.as_rows();
    if gain.shape() != [cols] {
        return Err(Error::shape("rms_norm", format!("gain {:?} for rows of {cols}", gain.shape())));
    }
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(rows);
    for r in x.data.chunks(cols.max(1)) {
        let ms = r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / cols as f64;
        let s = (1.0 / (ms + f64::from(eps)).sqrt()) as f32;
        inv.push(s);
        out.extend(r.iter().zip(gain.data()).map(|(&v, &g)| v * s * g));
    }
    Ok((Tensor::checked("rms_norm", x.shape.clone(), out)?, inv))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let nd = x.shape.len();
    if axis >= nd {
        return Err(Error::shape("softmax", format!("axis {axis} for rank {nd}")));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = vec![0f32; x.len()];
    let mut buf = vec![0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x.data[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = f64::from(x.data[idx(j)] - max).exp();
                sum += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[idx(j)] = (b / sum) as f32;
            }
        }
    }
    Tensor::checked("softmax", x.shape.clone(), out)
}

/// Softmax of one row into `out`, computed in f64. Returns `log Σ exp(x - max)`
/// together with the max, so callers can form log-probabilities.
pub(crate) fn softmax_row_f64(row: &[f32], out: &mut [f64]) -> (f64, f64) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (f64::from(v) - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    (sum.ln(), max)
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().map(|&v| f64::from(v)).sum::<f64>() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += f64::from(a[i * k + p]) * f64::from(b[p * n + j]);
                }
            }
        }
        out
    }

    fn m(rows: usize, cols: usize, v: &[f32]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        let id = m(2, 2, &[1., 0., 0., 1.]);
        assert_eq!(matmul(&a, &id).unwrap().data(), &[1., 2., 3., 4.]);
        let r = matmul(&m(1, 2, &[1., 2.]), &m(2, 1, &[3., 4.])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.]);
    }

    #[test]
    fn matmul_random_against_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(a.data(), b.data(), 5, 7, 3);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((f64::from(*g) - w).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(matmul(&Tensor::zeros(&[3]), &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[4, 9], 1.0, &mut rng);
        let b = Tensor::randn(&[6, 9], 1.0, &mut rng);
        let mut bt = vec![0f32; 54];
        for i in 0..6 {
            for j in 0..9 {
                bt[j * 6 + i] = b.data()[i * 9 + j];
            }
        }
        let want = naive_matmul(a.data(), &bt, 4, 9, 6);
        let got = matmul_nt(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((f64::from(*g) - w).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0., 0., 0.]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax(&Tensor::vector(vec![1000., 1000.]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(vec![1., 2., 3.]).unwrap(), 0).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((f64::from(*v) - ((i + 1) as f64).exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = m(2, 2, &[0., 5., 0., 1.]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-6);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let r = relu(&Tensor::vector(vec![-1., 0., 2.]).unwrap()).unwrap();
        assert_eq!(r.data(), &[0., 0., 2.]);
        assert_eq!(silu(&Tensor::scalar(0.0)).unwrap().data(), &[0.0]);
        let y = rms_norm(&Tensor::vector(vec![3., 4.]).unwrap(), &Tensor::full(&[2], 1.0), 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((f64::from(y.data()[0]) - 3.0 / r).abs() < 1e-6);
        assert!((f64::from(y.data()[1]) - 4.0 / r).abs() < 1e-6);
        assert!(add(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
        assert!(rms_norm(&Tensor::zeros(&[2, 3]), &Tensor::full(&[2], 1.0), 1e-5).is_err());
    }

    #[test]
    fn rms_norm_of_zero_row_without_eps_is_an_error() {
        let err = rms_norm(&Tensor::zeros(&[1, 2]), &Tensor::full(&[2], 1.0), 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "rms_norm" }));
    }

    #[test]
    fn constructor_checks_shape_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(Tensor::vector(vec![f32::NAN]), Err(Error::NonFinite { .. })));
        assert!(matches!(Tensor::vector(vec![f32::INFINITY]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn add_row_broadcasts() {
        let y = add_row(&m(2, 2, &[1., 2., 3., 4.]), &Tensor::vector(vec![10., 20.]).unwrap()).unwrap();
        assert_eq!(y.data(), &[11., 22., 13., 24.]);
        assert!(add_row(&m(2, 2, &[0.; 4]), &Tensor::vector(vec![1.; 3]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn prop_matmul_uniform_inputs_within_1e6(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = matmul(&Tensor::matrix(m, k, a.clone()).unwrap(), &Tensor::matrix(k, n, b.clone()).unwrap()).unwrap();
            let want = naive_matmul(&a, &b, m, k, n);
            for (g, w) in got.data().iter().zip(&want) {
                prop_assert!((f64::from(*g) - w).abs() < 1e-6);
            }
        }

        #[test]
        fn prop_softmax_rows_sum_to_one_and_shift_invariant(
            ticks in proptest::collection::vec(-3200i32..3200, 1..20), shift in -100i32..100
        ) {
            // multiples of 1/64 plus an integer shift stay exact in f32
            let row: Vec<f32> = ticks.iter().map(|&t| t as f32 / 64.0).collect();
            let shift = shift as f32;
            let x = Tensor::matrix(1, row.len(), row.clone()).unwrap();
            let s = softmax(&x, 1).unwrap();
            let total: f64 = s.data().iter().map(|&v| f64::from(v)).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            let shifted = Tensor::matrix(1, row.len(), row.iter().map(|v| v + shift).collect()).unwrap();
            let s2 = softmax(&shifted, 1).unwrap();
            prop_assert!(s.max_abs_diff(&s2).unwrap() < 1e-6);
        }

        #[test]
        fn prop_ops_are_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[8, 12], 1.0, &mut rng);
            let b = Tensor::randn(&[12, 5], 1.0, &mut rng);
            let g = Tensor::randn(&[12], 1.0, &mut rng);
            prop_assert!(matmul(&a, &b).unwrap().bit_eq(&matmul(&a, &b).unwrap()));
            prop_assert!(rms_norm(&a, &g, 1e-5).unwrap().bit_eq(&rms_norm(&a, &g, 1e-5).unwrap()));
            prop_assert!(softmax(&a, 1).unwrap().bit_eq(&softmax(&a, 1).unwrap()));
        }
    }
}
